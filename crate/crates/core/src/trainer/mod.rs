//! Supervised contrastive training with a hard-negative level schedule.
//!
//! Each optimizer step picks level `k = level_at(step)`, draws `grad_accum`
//! micro-batches of `batch_size` triplets, encodes (wrapped) queries,
//! positives and each item's level-`k` negative, pools, and averages the
//! InfoNCE gradients of the micro-batches into one Adam update.
//! In-batch negatives are drawn within a micro-batch, so accumulation equals
//! one large batch only when they are disabled.

mod adam;

pub use adam::{optimizer_step, AdamConfig, AdamState};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::curriculum::{build_schedule, CurriculumError, Schedule, ScheduleRecord, Strategy, DEFAULT_NUM_LEVELS};
use crate::datastore::record_to_line;
use crate::encoder::{wrap_query, Encoder, EncoderConfig, EncoderError};
use crate::numkit::{NumError, Tape, Tensor, Var};
use crate::objective::{info_nce_on_tape, NceConfig, ObjectiveError};
use crate::pooling::{pool_on_tape, PoolingConfig, PoolingError};
use crate::scalar::{count, lit, Scalar};
use crate::seeding::rng_for;
use crate::triplet::{TaskSpec, TrainingTriplet};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize, manifest: Box<RunManifest> },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Schedule(#[from] CurriculumError),
    #[error(transparent)]
    Num(#[from] NumError),
    /// Raised by a checkpoint hook.
    #[error("checkpoint hook failed: {0}")]
    Hook(String),
}

/// How queries are prefixed before encoding. Documents are never wrapped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionMode {
    /// A two-word instruction per task category.
    #[default]
    Category,
    /// The full task description.
    Description,
    None,
}

pub fn query_text(mode: InstructionMode, task: &TaskSpec, query: &str) -> String {
    match mode {
        InstructionMode::Category => wrap_query(task.category.short_instruction(), query),
        InstructionMode::Description => wrap_query(&task.description, query),
        InstructionMode::None => query.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub pooling: PoolingConfig,
    pub objective: NceConfig,
    pub optimizer: AdamConfig,
    pub instruction: InstructionMode,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub total_steps: usize,
    pub learning_rate: f64,
    /// Linear warmup length; the rate is constant afterwards.
    pub warmup_steps: usize,
    pub strategy: Strategy,
    pub num_levels: usize,
    /// Seeds the level schedule and batch order.
    pub seed: u64,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            pooling: PoolingConfig::default(),
            objective: NceConfig {
                temperature: 20.0,
                ..NceConfig::default()
            },
            optimizer: AdamConfig::default(),
            instruction: InstructionMode::default(),
            batch_size: 16,
            grad_accum: 2,
            total_steps: 400,
            learning_rate: 1e-3,
            warmup_steps: 20,
            strategy: Strategy::Curriculum,
            num_levels: DEFAULT_NUM_LEVELS,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.encoder.validate()?;
        self.objective.validate()?;
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("batch_size must be at least 1".to_string());
        }
        if self.batch_size < 2 && self.objective.in_batch_negatives {
            bad.push("batch_size must be at least 2 when in-batch negatives are enabled".into());
        }
        if self.grad_accum == 0 {
            bad.push("grad_accum must be at least 1".into());
        }
        if self.total_steps == 0 {
            bad.push("total_steps must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            bad.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.num_levels == 0 {
            bad.push("num_levels must be at least 1".into());
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            bad.push("optimizer needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(bad.join("; ")))
        }
    }

    pub fn schedule(&self) -> Result<Schedule, TrainError> {
        build_schedule(self.strategy, self.total_steps, self.num_levels, self.seed).map_err(|e| match e {
            CurriculumError::Config(m) => TrainError::Config(m),
            e => e.into(),
        })
    }

    /// Learning rate at 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub step: usize,
    pub level: usize,
    pub loss: f64,
    pub learning_rate: f64,
    /// Dataset indices of each micro-batch.
    pub batches: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDigest {
    pub name: String,
    pub records: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum RunStatus {
    Completed,
    Aborted { step: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub schedule: ScheduleRecord,
    pub datasets: Vec<DatasetDigest>,
    pub loss_log: Vec<LossEntry>,
    pub checkpoints: Vec<CheckpointRef>,
    pub status: RunStatus,
}

impl RunManifest {
    /// Tab-separated `step level loss` lines with a header.
    pub fn loss_log_text(&self) -> String {
        let mut s = String::from("step\tlevel\tloss\n");
        for e in &self.loss_log {
            s.push_str(&format!("{}\t{}\t{}\n", e.step, e.level, e.loss));
        }
        s
    }
}

/// SHA-256 of the canonical dataset serialization, equal to the digest of a
/// file written by `write_dataset`.
pub fn dataset_digest(triplets: &[TrainingTriplet]) -> String {
    let mut h = Sha256::new();
    for t in triplets {
        h.update(record_to_line(t).as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Epoch-wise seeded shuffles; a micro-batch never spans two epochs.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            seed,
            epoch: 0,
            order: (0..len).collect(),
            pos: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        self.order
            .shuffle(&mut rng_for(self.seed, &format!("batches/epoch/{}", self.epoch)));
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if self.pos + size > self.order.len() {
            self.epoch += 1;
            self.shuffle();
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

/// Pooled embedding of `text` as a `[1 × d]` tape node.
pub fn embed_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Encoder<T>,
    bound: &[Var],
    text: &str,
    pooling: &PoolingConfig,
) -> Result<Var, TrainError> {
    let out = model.forward(tape, bound, &model.tokenize(text))?;
    Ok(pool_on_tape(tape, out, pooling)?)
}

/// Mean InfoNCE of one micro-batch using each item's level-`level` negative.
pub fn micro_batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Encoder<T>,
    bound: &[Var],
    items: &[&TrainingTriplet],
    level: usize,
    cfg: &TrainConfig,
) -> Result<Var, TrainError> {
    let mut q = Vec::with_capacity(items.len());
    let mut p = Vec::with_capacity(items.len());
    let mut n = Vec::with_capacity(items.len());
    for t in items {
        let negative = t
            .negative(level)
            .ok_or_else(|| TrainError::Contract(format!("triplet has no level-{level} negative")))?;
        q.push(embed_on_tape(
            tape,
            model,
            bound,
            &query_text(cfg.instruction, &t.task, &t.query),
            &cfg.pooling,
        )?);
        p.push(embed_on_tape(tape, model, bound, &t.positive, &cfg.pooling)?);
        n.push(embed_on_tape(tape, model, bound, negative, &cfg.pooling)?);
    }
    let q = tape.concat_rows(&q)?;
    let p = tape.concat_rows(&p)?;
    let n = tape.concat_rows(&n)?;
    Ok(info_nce_on_tape(tape, q, p, Some(n), &cfg.objective)?)
}

/// Loss and gradients averaged over micro-batches, in parameter order.
pub fn step_gradients<T: Scalar>(
    model: &Encoder<T>,
    micro_batches: &[Vec<&TrainingTriplet>],
    level: usize,
    cfg: &TrainConfig,
) -> Result<(T, Vec<Tensor<T>>), TrainError> {
    if micro_batches.is_empty() {
        return Err(TrainError::Contract("no micro-batches".into()));
    }
    let mut total = T::zero();
    let mut sum: Vec<Tensor<T>> = model
        .params()
        .tensors()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect::<Result<_, _>>()?;
    for items in micro_batches {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let loss = micro_batch_loss(&mut tape, model, &bound, items, level, cfg)?;
        total += tape.value(loss).item()?;
        let mut grads = tape.backward(loss)?;
        for (acc, &v) in sum.iter_mut().zip(&bound) {
            if let Some(g) = grads.take(v) {
                for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += x;
                }
            }
        }
    }
    let g = count::<T>(micro_batches.len());
    for acc in &mut sum {
        for a in acc.data_mut() {
            *a /= g;
        }
    }
    Ok((total / g, sum))
}

pub struct TrainRun<T> {
    pub model: Encoder<T>,
    pub manifest: RunManifest,
}

/// Called after steps that are multiples of `checkpoint_every`; returns the
/// checkpoint reference to record, if any.
pub type CheckpointHook<'a, T> = dyn FnMut(usize, &Encoder<T>) -> Result<Option<CheckpointRef>, TrainError> + 'a;

pub fn train<T: Scalar>(cfg: &TrainConfig, data: &[TrainingTriplet]) -> Result<TrainRun<T>, TrainError> {
    let model = Encoder::init(cfg.encoder.clone())?;
    train_from(model, cfg, data, &mut |_, _| Ok(None))
}

pub fn train_from<T: Scalar>(
    mut model: Encoder<T>,
    cfg: &TrainConfig,
    data: &[TrainingTriplet],
    hook: &mut CheckpointHook<'_, T>,
) -> Result<TrainRun<T>, TrainError> {
    cfg.validate()?;
    if model.config() != &cfg.encoder {
        return Err(TrainError::Config(
            "starting model does not match the encoder config".into(),
        ));
    }
    if data.len() < cfg.batch_size {
        return Err(TrainError::Config(format!(
            "dataset has {} triplets, fewer than one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    if let Some((i, t)) = data.iter().enumerate().find(|(_, t)| t.num_levels() != cfg.num_levels) {
        return Err(TrainError::Config(format!(
            "triplet {i} has {} negatives, config expects {}",
            t.num_levels(),
            cfg.num_levels
        )));
    }
    let schedule = cfg.schedule()?;
    let mut manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        config: cfg.clone(),
        schedule: schedule.record(),
        datasets: vec![DatasetDigest {
            name: "train".into(),
            records: data.len(),
            sha256: dataset_digest(data),
        }],
        loss_log: Vec::with_capacity(cfg.total_steps),
        checkpoints: Vec::new(),
        status: RunStatus::Completed,
    };
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut state = AdamState::new(cfg.optimizer);
    for step in 1..=cfg.total_steps {
        let level = schedule.level_at(step)?;
        let batches: Vec<Vec<usize>> = (0..cfg.grad_accum)
            .map(|_| sampler.next_batch(cfg.batch_size))
            .collect();
        let items: Vec<Vec<&TrainingTriplet>> = batches.iter().map(|b| b.iter().map(|&i| &data[i]).collect()).collect();
        let (loss, grads) = step_gradients(&model, &items, level, cfg)?;
        let loss = loss.to_f64().unwrap_or(f64::NAN);
        let lr = cfg.lr_at(step);
        manifest.loss_log.push(LossEntry {
            step,
            level,
            loss,
            learning_rate: lr,
            batches,
        });
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            manifest.status = RunStatus::Aborted {
                step,
                reason: format!("loss {loss} or its gradient is not finite"),
            };
            return Err(TrainError::NonFinite {
                step,
                manifest: Box::new(manifest),
            });
        }
        optimizer_step(model.params_mut().tensors_mut(), &grads, lit::<T>(lr), &mut state)?;
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.total_steps {
            if let Some(r) = hook(step, &model)? {
                manifest.checkpoints.push(r);
            }
        }
    }
    if let Some(r) = hook(cfg.total_steps, &model)? {
        manifest.checkpoints.push(r);
    }
    Ok(TrainRun { model, manifest })
}
