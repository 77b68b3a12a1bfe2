use hardneg::numkit::gradcheck::{check_gradients, STEP};
use hardneg::numkit::{NumError, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum against a fixed random tensor, so every output element
/// contributes a distinct amount to the checked scalar.
fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(random(&mut rng, &shape));
    let prod = tape.mul(out, w).unwrap();
    tape.sum_all(prod)
}

fn assert_grad<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> hardneg::numkit::Result<Var>,
{
    let report = check_gradients(inputs, STEP, 64, f).unwrap();
    assert!(
        report.max_rel_error < TOL,
        "{name}: rel err {:.3e} at {:?} (analytic {:.6e}, numeric {:.6e})",
        report.max_rel_error,
        report.worst,
        report.analytic_at_worst,
        report.numeric_at_worst
    );
}

#[test]
fn sum_of_squares_gradient_is_2x() {
    let x = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let loss = tape.sum_all(sq);
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(v).unwrap();
    for (gv, xv) in g.data().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let z = Tensor::new(vec![1, 4], vec![0.2, -0.7, 1.5, 0.1]).unwrap();
    let target = 2;
    let mut tape = Tape::new();
    let v = tape.param(z.clone());
    let logp = tape.masked_log_softmax(v, vec![true; 4]).unwrap();
    let picked = tape.pick(logp, vec![target]).unwrap();
    let loss = tape.scale(picked, -1.0);
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(v).unwrap();
    let p = z.softmax_lastdim().unwrap();
    for j in 0..4 {
        let expected: f64 = p.data()[j] - if j == target { 1.0 } else { 0.0 };
        assert!((g.data()[j] - expected).abs() < 1e-14);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let v = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let s = tape.scale(v, 2.0);
    assert!(matches!(tape.backward(s), Err(NumError::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let p = tape.mul(a, b).unwrap();
    let d = tape.detach(p);
    let q = tape.add(p, d).unwrap();
    let loss = tape.sum_all(q);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(b).is_none());
    assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn per_op_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..4u64 {
        let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let bt = random(&mut rng, &[n, k]);
        let c = random(&mut rng, &[m, k]);
        let bias = random(&mut rng, &[k]);
        let pos = Tensor::new(vec![m, k], (0..m * k).map(|_| rng.gen_range(0.1..2.0)).collect()).unwrap();

        assert_grad("matmul", &[a.clone(), b.clone()], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            Ok(probe(t, o, case))
        });
        assert_grad("matmul_nt", &[a.clone(), bt.clone()], |t, v| {
            let o = t.matmul_nt(v[0], v[1])?;
            Ok(probe(t, o, case))
        });
        assert_grad("add/sub/mul", &[a.clone(), c.clone()], |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            let o = t.mul(s, d)?;
            Ok(probe(t, o, case))
        });
        assert_grad("add_row", &[a.clone(), bias.clone()], |t, v| {
            let o = t.add_row(v[0], v[1])?;
            Ok(probe(t, o, case))
        });
        assert_grad("softmax", std::slice::from_ref(&a), |t, v| {
            let o = t.softmax_lastdim(v[0])?;
            Ok(probe(t, o, case))
        });
        assert_grad("ln/sqrt/exp", std::slice::from_ref(&pos), |t, v| {
            let l = t.ln(v[0])?;
            let s = t.sqrt(v[0])?;
            let e = t.exp(l);
            let a1 = t.add(l, s)?;
            let o = t.add(a1, e)?;
            Ok(probe(t, o, case))
        });
        assert_grad("gelu", std::slice::from_ref(&a), |t, v| {
            let o = t.gelu(v[0]);
            Ok(probe(t, o, case))
        });
        if k > 1 {
            let gamma = random(&mut rng, &[k]);
            assert_grad("layer_norm", &[a.clone(), gamma, bias.clone()], |t, v| {
                let o = t.layer_norm(v[0], v[1], v[2])?;
                Ok(probe(t, o, case))
            });
        }
        assert_grad("l2_normalize_rows", std::slice::from_ref(&a), |t, v| {
            let o = t.l2_normalize_rows(v[0])?;
            Ok(probe(t, o, case))
        });
        assert_grad("div_scalar", &[a.clone(), Tensor::scalar(1.7)], |t, v| {
            let o = t.div_scalar(v[0], v[1])?;
            Ok(probe(t, o, case))
        });
        assert_grad("sum_rows/sum_cols/transpose", std::slice::from_ref(&a), |t, v| {
            let r = t.sum_rows(v[0])?;
            let c = t.sum_cols(v[0])?;
            let ct = t.transpose(c)?;
            let rr = t.mul(r, r)?;
            let o = t.matmul(ct, v[0])?;
            let o2 = t.sum_all(rr);
            let s = probe(t, o, case);
            t.add(s, o2)
        });
        assert_grad("slice/concat/stack/reshape", &[a.clone(), c.clone()], |t, v| {
            let s = t.slice_cols(v[0], 0, 1)?;
            let cc = t.concat_cols(&[s, v[1]])?;
            let cr = t.concat_rows(&[v[0], v[1]])?;
            let st = t.stack(&[v[0], v[1]])?;
            let re = t.reshape(st, vec![2 * m, k])?;
            let x = t.mul(cr, re)?;
            let p1 = probe(t, cc, case);
            let p2 = probe(t, x, case + 1);
            t.add(p1, p2)
        });
        let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..m)).collect();
        assert_grad("gather_rows", std::slice::from_ref(&a), |t, v| {
            let o = t.gather_rows(v[0], &ids)?;
            Ok(probe(t, o, case))
        });
        let mask: Vec<bool> = (0..m * k).map(|i| i % k == 0 || rng.gen_bool(0.6)).collect();
        let picks: Vec<usize> = (0..m).map(|r| r * k).collect();
        assert_grad("masked_log_softmax/pick", std::slice::from_ref(&a), |t, v| {
            let o = t.masked_log_softmax(v[0], mask.clone())?;
            let p = t.pick(o, picks.clone())?;
            Ok(probe(t, p, case))
        });
    }
}

#[test]
fn gradients_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[5, 4]);
    let b = random(&mut rng, &[4, 3]);
    let run = || {
        let mut t = Tape::new();
        let va = t.param(a.clone());
        let vb = t.param(b.clone());
        let o = t.matmul(va, vb).unwrap();
        let s = t.softmax_lastdim(o).unwrap();
        let l = probe(&mut t, s, 9);
        let g = t.backward(l).unwrap();
        (
            t.value(l).clone(),
            g.get(va).unwrap().clone(),
            g.get(vb).unwrap().clone(),
        )
    };
    let (l1, ga1, gb1) = run();
    let (l2, ga2, gb2) = run();
    assert_eq!(l1.data()[0].to_bits(), l2.data()[0].to_bits());
    assert_eq!(ga1, ga2);
    assert_eq!(gb1, gb2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[rows, cols]).map(|v| v * scale);
        let s = x.softmax_lastdim().unwrap();
        for i in 0..rows {
            let sum: f64 = s.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(s.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn composite_gradient_matches_finite_differences(m in 1usize..5, k in 2usize..7, n in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[m, k]);
        let w = random(&mut rng, &[k, n]);
        let gamma = random(&mut rng, &[k]);
        let beta = random(&mut rng, &[k]);
        let report = check_gradients(&[x, w, gamma, beta], STEP, 64, |t, v| {
            let h = t.layer_norm(v[0], v[2], v[3])?;
            let h = t.gelu(h);
            let o = t.matmul(h, v[1])?;
            let p = t.softmax_lastdim(o)?;
            Ok(probe(t, p, seed))
        }).unwrap();
        prop_assert!(report.max_rel_error < TOL, "rel err {:.3e}", report.max_rel_error);
    }
}
