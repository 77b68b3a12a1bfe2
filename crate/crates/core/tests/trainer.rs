use hardneg::curriculum::Strategy;
use hardneg::encoder::{Encoder, EncoderConfig};
use hardneg::numkit::gradcheck::{check_gradients, STEP};
use hardneg::numkit::{NumError, Tape, Tensor};
use hardneg::pooling::{PoolingConfig, PoolingMethod};
use hardneg::synth::{no_sleep, run_synthesis, MockBackend, SynthConfig};
use hardneg::trainer::{
    dataset_digest, micro_batch_loss, optimizer_step, step_gradients, train, train_from, AdamConfig, AdamState,
    BatchSampler, CheckpointRef, RunStatus, TrainConfig, TrainError,
};
use hardneg::triplet::TrainingTriplet;
use proptest::prelude::*;

fn mock(n: usize, seed: u64) -> Vec<TrainingTriplet> {
    let cfg = SynthConfig {
        num_triplets: n,
        seed,
        num_words: vec![50],
        ..SynthConfig::default()
    };
    run_synthesis(&cfg, &MockBackend::new(seed), &no_sleep).unwrap().0
}

fn small(steps: usize, strategy: Strategy, seed: u64) -> TrainConfig {
    TrainConfig {
        encoder: EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 32,
            ff_dim: 64,
            max_seq_len: 64,
            seed,
            ..EncoderConfig::default()
        },
        batch_size: 8,
        grad_accum: 1,
        total_steps: steps,
        warmup_steps: 0,
        strategy,
        seed,
        ..TrainConfig::default()
    }
}

/// Plain scalar Adam, written out longhand.
fn scalar_adam(p: &mut f64, m: &mut f64, v: &mut f64, t: i32, g: f64, lr: f64) {
    *m = 0.9 * *m + 0.1 * g;
    *v = 0.999 * *v + 0.001 * g * g;
    let m_hat = *m / (1.0 - 0.9f64.powi(t));
    let v_hat = *v / (1.0 - 0.999f64.powi(t));
    *p -= lr * m_hat / (v_hat.sqrt() + 1e-8);
}

#[test]
fn adam_matches_scalar_reference() {
    let grads_stream = [[0.5, -2.0, 1e-3], [0.1, 0.3, -4.0], [-1.0, 0.0, 2.5]];
    let mut params = [Tensor::new(vec![3], vec![1.0, -1.0, 0.25]).unwrap()];
    let mut reference = [(1.0, 0.0, 0.0), (-1.0, 0.0, 0.0), (0.25, 0.0, 0.0)];
    let mut state = AdamState::new(AdamConfig::default());
    for (t, g) in grads_stream.iter().enumerate() {
        let gt = vec![Tensor::new(vec![3], g.to_vec()).unwrap()];
        optimizer_step(params.iter_mut(), &gt, 0.01, &mut state).unwrap();
        for (r, &gi) in reference.iter_mut().zip(g) {
            scalar_adam(&mut r.0, &mut r.1, &mut r.2, t as i32 + 1, gi, 0.01);
        }
        for (i, r) in reference.iter().enumerate() {
            assert!((params[0].data()[i] - r.0).abs() < 1e-15);
        }
    }
}

#[test]
fn first_adam_step_is_lr_times_sign() {
    // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g|+ε).
    let mut params = [Tensor::<f64>::new(vec![2], vec![0.0, 0.0]).unwrap()];
    let mut state = AdamState::new(AdamConfig::default());
    let g = vec![Tensor::new(vec![2], vec![3.0, -0.5]).unwrap()];
    optimizer_step(params.iter_mut(), &g, 0.1, &mut state).unwrap();
    assert!((params[0].data()[0] + 0.1 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
    assert!((params[0].data()[1] - 0.1 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let start = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut params = [start.clone()];
    let mut state = AdamState::new(AdamConfig::default());
    for _ in 0..3 {
        optimizer_step(
            params.iter_mut(),
            &[Tensor::zeros(vec![2, 2]).unwrap()],
            0.5,
            &mut state,
        )
        .unwrap();
    }
    assert_eq!(params[0], start);
}

#[test]
fn adam_rejects_shape_mismatch_and_is_deterministic() {
    let mut params = [Tensor::<f64>::zeros(vec![2]).unwrap()];
    let mut state = AdamState::new(AdamConfig::default());
    let bad = [Tensor::zeros(vec![3]).unwrap()];
    assert!(matches!(
        optimizer_step(params.iter_mut(), &bad, 0.1, &mut state),
        Err(TrainError::Contract(_))
    ));
    assert!(matches!(
        optimizer_step(params.iter_mut(), &[], 0.1, &mut state),
        Err(TrainError::Contract(_))
    ));

    let run = || {
        let mut p = vec![Tensor::new(vec![2], vec![0.3, -0.3]).unwrap()];
        let mut s = AdamState::new(AdamConfig::default());
        for i in 0..5 {
            let g = [Tensor::new(vec![2], vec![i as f64, 1.0 - i as f64]).unwrap()];
            optimizer_step(p.iter_mut(), &g, 0.05, &mut s).unwrap();
        }
        (p, s)
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_decreases_on_mock_data() {
    let data = mock(64, 11);
    let run = train::<f64>(&small(20, Strategy::Fixed(4), 11), &data).unwrap();
    let losses: Vec<f64> = run.manifest.loss_log.iter().map(|e| e.loss).collect();
    let head = losses[..5].iter().sum::<f64>() / 5.0;
    let tail = losses[15..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{losses:?}");
}

#[test]
fn runs_are_reproducible_and_auditable() {
    let data = mock(32, 12);
    let cfg = small(8, Strategy::Curriculum, 12);
    let a = train::<f64>(&cfg, &data).unwrap();
    let b = train::<f64>(&cfg, &data).unwrap();
    assert_eq!(a.manifest, b.manifest);
    assert_eq!(a.model, b.model);
    let m = &a.manifest;
    assert_eq!(m.loss_log.len(), 8);
    assert!(m.loss_log.iter().all(|e| e.loss.is_finite()));
    assert_eq!(m.status, RunStatus::Completed);
    assert_eq!(m.datasets[0].sha256, dataset_digest(&data));
    let schedule = cfg.schedule().unwrap();
    for e in &m.loss_log {
        assert_eq!(e.level, schedule.level_at(e.step).unwrap());
    }
    let levels: Vec<usize> = m.schedule.blocks.iter().map(|b| b.level).collect();
    assert_eq!(levels, vec![4, 3, 2, 1]);

    // The first logged loss is reproduced by the initial model on the logged
    // batch with negatives[level - 1].
    let init: Encoder<f64> = Encoder::init(cfg.encoder.clone()).unwrap();
    let first = &m.loss_log[0];
    let items: Vec<&TrainingTriplet> = first.batches[0].iter().map(|&i| &data[i]).collect();
    let mut tape = Tape::new();
    let bound = init.bind(&mut tape, false);
    let loss = micro_batch_loss(&mut tape, &init, &bound, &items, first.level, &cfg).unwrap();
    assert_eq!(tape.value(loss).item().unwrap(), first.loss);
    let text = m.loss_log_text();
    assert_eq!(text.lines().count(), 9);
    assert!(text.starts_with("step\tlevel\tloss\n1\t4\t"));
}

#[test]
fn config_errors() {
    let data = mock(8, 13);
    let mut one = small(4, Strategy::Fixed(1), 0);
    one.batch_size = 1;
    assert!(matches!(train::<f64>(&one, &data), Err(TrainError::Config(_))));
    one.objective.in_batch_negatives = false;
    assert!(train::<f64>(&one, &data).is_ok());
    let big = TrainConfig {
        batch_size: 16,
        ..small(4, Strategy::Fixed(1), 0)
    };
    assert!(matches!(train::<f64>(&big, &data), Err(TrainError::Config(_))));
    let short = small(3, Strategy::Fixed(1), 0);
    assert!(matches!(train::<f64>(&short, &data), Err(TrainError::Config(_))));
    let bad_level = small(2, Strategy::Fixed(5), 0);
    assert!(matches!(train::<f64>(&bad_level, &data), Err(TrainError::Config(_))));
}

#[test]
fn non_finite_loss_aborts_with_manifest() {
    let data = mock(8, 14);
    let cfg = small(4, Strategy::Fixed(1), 0);
    let mut model: Encoder<f64> = Encoder::init(cfg.encoder.clone()).unwrap();
    model.params_mut().get_mut("final_ln.bias").unwrap().data_mut()[0] = f64::NAN;
    match train_from(model, &cfg, &data, &mut |_, _| Ok(None)) {
        Err(TrainError::NonFinite { step, manifest }) => {
            assert_eq!(step, 1);
            assert_eq!(manifest.loss_log.len(), 1);
            assert!(matches!(manifest.status, RunStatus::Aborted { step: 1, .. }));
        }
        other => panic!("{:?}", other.err()),
    }
}

#[test]
fn checkpoint_hook_follows_cadence() {
    let data = mock(8, 15);
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..small(5, Strategy::Curriculum, 0)
    };
    let mut seen = Vec::new();
    let model = Encoder::init(cfg.encoder.clone()).unwrap();
    let run = train_from::<f64>(model, &cfg, &data, &mut |step, _| {
        seen.push(step);
        Ok(Some(CheckpointRef {
            path: format!("step-{step}"),
            sha256: String::new(),
        }))
    })
    .unwrap();
    assert_eq!(seen, vec![2, 4, 5]);
    assert_eq!(run.manifest.checkpoints.len(), 3);
}

#[test]
fn warmup_is_linear_then_constant() {
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        warmup_steps: 4,
        ..TrainConfig::default()
    };
    let lrs: Vec<f64> = (1..=6).map(|s| cfg.lr_at(s)).collect();
    assert_eq!(lrs, vec![2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3, 1e-3]);
}

#[test]
fn sampler_draws_whole_epochs() {
    let mut s = BatchSampler::new(10, 3);
    let mut first: Vec<usize> = (0..3).flat_map(|_| s.next_batch(3)).collect();
    first.sort_unstable();
    first.dedup();
    assert_eq!(first.len(), 9);
    let next = s.next_batch(3);
    assert_eq!(next.len(), 3);
}

#[test]
fn accumulation_equals_concatenated_batch() {
    let data = mock(8, 16);
    let mut cfg = small(1, Strategy::Fixed(2), 16);
    // In-batch negatives couple items across a batch, so equivalence holds
    // only without them.
    cfg.objective.in_batch_negatives = false;
    let model: Encoder<f64> = Encoder::init(cfg.encoder.clone()).unwrap();
    let all: Vec<&TrainingTriplet> = data.iter().collect();
    let (la, ga) = step_gradients(&model, &[all[..4].to_vec(), all[4..].to_vec()], 2, &cfg).unwrap();
    let (lb, gb) = step_gradients(&model, std::slice::from_ref(&all), 2, &cfg).unwrap();
    assert!((la - lb).abs() < 1e-12);
    for (a, b) in ga.iter().zip(&gb) {
        assert!(a.max_abs_diff(b) < 1e-9);
    }
    let update = |g: &[Tensor<f64>]| {
        let mut m = model.clone();
        let mut s = AdamState::new(AdamConfig::default());
        optimizer_step(m.params_mut().tensors_mut(), g, 1e-3, &mut s).unwrap();
        m
    };
    let (ma, mb) = (update(&ga), update(&gb));
    for (a, b) in ma.params().tensors().zip(mb.params().tensors()) {
        assert!(a.max_abs_diff(b) < 1e-9);
    }
}

fn tiny_encoder(seed: u64) -> EncoderConfig {
    EncoderConfig {
        num_layers: 1,
        num_heads: 2,
        model_dim: 8,
        ff_dim: 8,
        max_seq_len: 12,
        seed,
        ..EncoderConfig::default()
    }
}

#[test]
fn pipeline_gradient_matches_finite_differences() {
    // Key biases add the same score to every key of a query row, which the
    // softmax cancels, so their true gradient is exactly zero and a central
    // difference only measures rounding noise of the loss. They are held
    // fixed for the relative check and checked against zero separately.
    let data = mock(2, 17);
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let method = [PoolingMethod::Ata, PoolingMethod::Mean, PoolingMethod::Last][case as usize % 3];
        let cfg = TrainConfig {
            encoder: tiny_encoder(case),
            pooling: PoolingConfig::with_method(method),
            ..TrainConfig::default()
        };
        let model: Encoder<f64> = Encoder::init(cfg.encoder.clone()).unwrap();
        let items: Vec<&TrainingTriplet> = data.iter().collect();
        let level = 1 + case as usize % 4;
        let is_key_bias: Vec<bool> = model.params().iter().map(|(n, _)| n.ends_with("attn.bk")).collect();
        assert!(is_key_bias.iter().any(|&b| b));
        let all: Vec<Tensor<f64>> = model.params().tensors().cloned().collect();
        let inputs: Vec<Tensor<f64>> = all
            .iter()
            .zip(&is_key_bias)
            .filter(|(_, &k)| !k)
            .map(|(t, _)| t.clone())
            .collect();
        let report = check_gradients(&inputs, STEP, 3, |tape, vars| {
            let mut free = vars.iter();
            let bound: Vec<_> = all
                .iter()
                .zip(&is_key_bias)
                .map(|(t, &k)| {
                    if k {
                        tape.constant(t.clone())
                    } else {
                        *free.next().unwrap()
                    }
                })
                .collect();
            micro_batch_loss(tape, &model, &bound, &items, level, &cfg).map_err(|e| NumError::Contract(e.to_string()))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "case {case}: {report:?}");
        worst = worst.max(report.max_rel_error);

        let (_, grads) = step_gradients(&model, std::slice::from_ref(&items), level, &cfg).unwrap();
        for (g, _) in grads.iter().zip(&is_key_bias).filter(|(_, &k)| k) {
            assert!(
                g.data().iter().all(|x| x.abs() < 1e-12),
                "case {case}: key bias grad {:?}",
                g.data()
            );
        }
    }
    assert!(worst < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sampler_batches_are_distinct_and_in_range(len in 2usize..40, size in 1usize..8, seed in any::<u64>()) {
        prop_assume!(size <= len);
        let mut s = BatchSampler::new(len, seed);
        for _ in 0..10 {
            let b = s.next_batch(size);
            let mut u = b.clone();
            u.sort_unstable();
            u.dedup();
            prop_assert_eq!(u.len(), size);
            prop_assert!(b.iter().all(|&i| i < len));
        }
    }
}
