//! Cosine similarity and the InfoNCE contrastive loss.
//!
//! For item `b` with positive similarity `s⁺` and negative similarities `s⁻ⱼ`:
//!
//! ```text
//! loss_b = −log( e^{τ·s⁺} / (e^{τ·s⁺} + Σⱼ e^{τ·s⁻ⱼ}) )
//! ```
//!
//! with `τ` multiplicative by default (`Divisive` uses `s/τ`). The negative set
//! is the item's own hard negative plus, with in-batch negatives on, every
//! other item's positive. The batch loss is the mean over items.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{NumError, Tape, Var};
use crate::pooling::SentenceEmbedding;
use crate::scalar::{count, lit, Scalar};

/// Norms at or below this are rejected by [`cosine`].
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("objective contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// Logits are `τ·s`.
    #[default]
    Multiplicative,
    /// Logits are `s/τ`.
    Divisive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NceConfig {
    pub temperature: f64,
    pub temperature_mode: TemperatureMode,
    /// Use other items' positives as negatives.
    pub in_batch_negatives: bool,
    /// Also use other items' hard negatives as negatives.
    pub include_other_hard: bool,
}

impl Default for NceConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            temperature_mode: TemperatureMode::Multiplicative,
            in_batch_negatives: true,
            include_other_hard: false,
        }
    }
}

impl NceConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(ObjectiveError::Contract(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Factor applied to similarities before exponentiation.
    pub fn logit_scale(&self) -> f64 {
        match self.temperature_mode {
            TemperatureMode::Multiplicative => self.temperature,
            TemperatureMode::Divisive => 1.0 / self.temperature,
        }
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub fn cosine<T: Scalar>(u: &[T], v: &[T]) -> Result<T, ObjectiveError> {
    if u.len() != v.len() {
        return Err(ObjectiveError::Contract(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    let floor = lit::<T>(MIN_NORM);
    if nu <= floor || nv <= floor {
        return Err(ObjectiveError::Degenerate("cosine of a zero-norm vector".into()));
    }
    let dot: T = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    // Rounding can push |dot| a hair past the product of norms.
    Ok((dot / (nu * nv)).max(-T::one()).min(T::one()))
}

/// One item's loss from raw similarities, via log-sum-exp.
///
/// Written as `ln(1 + Σⱼ e^{dⱼ})` with `dⱼ = τ·s⁻ⱼ − τ·s⁺`, so a loss far
/// below one ulp of `τ·s⁺` is still resolved.
pub fn info_nce_from_similarities<T: Scalar>(positive: T, negatives: &[T], logit_scale: T) -> T {
    let pos = logit_scale * positive;
    let gaps: Vec<T> = negatives.iter().map(|&s| logit_scale * s - pos).collect();
    let max = gaps.iter().copied().fold(T::zero(), T::max);
    if max == T::zero() {
        gaps.iter().map(|&d| d.exp()).sum::<T>().ln_1p()
    } else {
        max + ((-max).exp() + gaps.iter().map(|&d| (d - max).exp()).sum::<T>()).ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch<T> {
    pub queries: Vec<SentenceEmbedding<T>>,
    pub positives: Vec<SentenceEmbedding<T>>,
    /// Empty, or one per item.
    pub hard_negatives: Vec<SentenceEmbedding<T>>,
}

impl<T: Scalar> ContrastiveBatch<T> {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    fn validate(&self) -> Result<(), ObjectiveError> {
        let b = self.queries.len();
        if b == 0 {
            return Err(ObjectiveError::Contract("empty batch".into()));
        }
        if self.positives.len() != b || !(self.hard_negatives.is_empty() || self.hard_negatives.len() == b) {
            return Err(ObjectiveError::Contract(format!(
                "batch has {b} queries, {} positives, {} hard negatives",
                self.positives.len(),
                self.hard_negatives.len()
            )));
        }
        Ok(())
    }

    /// Negative similarities for item `b` under `cfg`.
    pub fn negative_similarities(&self, b: usize, cfg: &NceConfig) -> Result<Vec<T>, ObjectiveError> {
        let q = self.queries[b].as_slice();
        let mut out = Vec::new();
        for (j, p) in self.positives.iter().enumerate() {
            if j != b && cfg.in_batch_negatives {
                out.push(cosine(q, p.as_slice())?);
            }
        }
        for (j, n) in self.hard_negatives.iter().enumerate() {
            if j == b || cfg.include_other_hard {
                out.push(cosine(q, n.as_slice())?);
            }
        }
        Ok(out)
    }
}

/// Mean InfoNCE over a batch of plain embeddings.
pub fn info_nce<T: Scalar>(batch: &ContrastiveBatch<T>, cfg: &NceConfig) -> Result<T, ObjectiveError> {
    cfg.validate()?;
    batch.validate()?;
    let scale = lit::<T>(cfg.logit_scale());
    let mut total = T::zero();
    for b in 0..batch.len() {
        let pos = cosine(batch.queries[b].as_slice(), batch.positives[b].as_slice())?;
        let negs = batch.negative_similarities(b, cfg)?;
        total += info_nce_from_similarities(pos, &negs, scale);
    }
    Ok(total / count::<T>(batch.len()))
}

/// Mean InfoNCE on the tape. `queries`, `positives` and `hard_negatives` are
/// `[B × d]` rows of pooled embeddings.
pub fn info_nce_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    positives: Var,
    hard_negatives: Option<Var>,
    cfg: &NceConfig,
) -> Result<Var, ObjectiveError> {
    cfg.validate()?;
    let b = tape.value(queries).num_rows();
    if b == 0 || tape.value(queries).ndim() != 2 {
        return Err(ObjectiveError::Contract(
            "queries must be a non-empty [B × d] matrix".into(),
        ));
    }
    for (name, v) in [("positives", Some(positives)), ("hard_negatives", hard_negatives)] {
        if let Some(v) = v {
            if tape.value(v).shape() != tape.value(queries).shape() {
                return Err(ObjectiveError::Contract(format!(
                    "{name} shape {:?} differs from queries {:?}",
                    tape.value(v).shape(),
                    tape.value(queries).shape()
                )));
            }
        }
    }
    let unit = |tape: &mut Tape<T>, v: Var| {
        tape.l2_normalize_rows(v)
            .map_err(|e| ObjectiveError::Degenerate(e.to_string()))
    };
    let q = unit(tape, queries)?;
    let p = unit(tape, positives)?;
    let mut blocks = vec![tape.matmul_nt(q, p)?];
    if let Some(n) = hard_negatives {
        let n = unit(tape, n)?;
        blocks.push(tape.matmul_nt(q, n)?);
    }
    let width = b * blocks.len();
    let sims = if blocks.len() == 1 {
        blocks[0]
    } else {
        tape.concat_cols(&blocks)?
    };
    let logits = tape.scale(sims, lit::<T>(cfg.logit_scale()));
    let mut mask = vec![false; b * width];
    for i in 0..b {
        for j in 0..b {
            mask[i * width + j] = i == j || cfg.in_batch_negatives;
            if blocks.len() == 2 {
                mask[i * width + b + j] = i == j || cfg.include_other_hard;
            }
        }
    }
    let log_probs = tape.masked_log_softmax(logits, mask)?;
    let picked = tape.pick(log_probs, (0..b).map(|i| i * width + i).collect())?;
    let mean = tape.mean_all(picked);
    Ok(tape.scale(mean, -T::one()))
}
