//! Sentence pooling: mean, last token, and anchor-token-aware (ATA).
//!
//! ATA weights each token by the log-scaled attention mass it is involved in
//! across all heads of the final layer:
//!
//! ```text
//! raw[t]  = Σ_h Σ_i ln(a[h][i][t] · K + 1)      (incoming: t as key)
//! raw[t]  = Σ_h Σ_j ln(a[h][t][j] · K + 1)      (literal: t as query)
//! w̃[t]    = raw[t] / Σ_s raw[s]
//! v       = Σ_t w̃[t] · hidden[t]
//! ```
//!
//! The `· K` keeps the log argument on the same scale for any sequence length:
//! uniform attention gives `ln 2` per entry regardless of `K`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderOutput, TapeOutput};
use crate::numkit::{NumError, Tape, Tensor, Var};
use crate::scalar::{count, lit, Scalar};

/// Tolerance on attention row sums accepted by [`ata_weights`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PoolingError {
    #[error("pooling shape error: {0}")]
    Shape(String),
    #[error("pooling contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Which attention axis ATA sums over for each token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtaDirection {
    /// Attention the token receives as a key, summed over queries and heads.
    #[default]
    Incoming,
    /// Attention the token hands out as a query, summed over keys and heads.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMethod {
    Mean,
    Last,
    #[default]
    Ata,
}

impl PoolingMethod {
    pub fn name(self) -> &'static str {
        match self {
            PoolingMethod::Mean => "mean",
            PoolingMethod::Last => "last",
            PoolingMethod::Ata => "ata",
        }
    }
}

impl std::str::FromStr for PoolingMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Self::Mean),
            "last" => Ok(Self::Last),
            "ata" => Ok(Self::Ata),
            other => Err(format!("unknown pooling method {other:?} (expected mean, last or ata)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolingConfig {
    pub method: PoolingMethod,
    pub direction: AtaDirection,
    /// Treat ATA weights as constants during backpropagation.
    pub stop_gradient: bool,
}

impl PoolingConfig {
    pub fn with_method(method: PoolingMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorWeights<T> {
    pub raw: Vec<T>,
    pub normalized: Vec<T>,
}

/// Pooled sentence vector of length `model_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbedding<T>(pub Vec<T>);

impl<T: Scalar> SentenceEmbedding<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

fn attention_dims<T: Scalar>(attention: &Tensor<T>) -> Result<(usize, usize), PoolingError> {
    match attention.shape() {
        [h, k, k2] if k == k2 => Ok((*h, *k)),
        other => Err(PoolingError::Shape(format!(
            "attention must be [H × K × K], got {other:?}"
        ))),
    }
}

fn check_stochastic<T: Scalar>(attention: &Tensor<T>) -> Result<(), PoolingError> {
    let tol = lit::<T>(ROW_SUM_TOLERANCE);
    for r in 0..attention.num_rows() {
        let row = attention.row(r);
        if row.iter().any(|&a| a < T::zero() || !a.is_finite()) {
            return Err(PoolingError::Contract(format!(
                "attention row {r} has a negative or non-finite entry"
            )));
        }
        let sum: T = row.iter().copied().sum();
        if (sum - T::one()).abs() > tol {
            return Err(PoolingError::Contract(format!(
                "attention row {r} sums to {sum}, not 1"
            )));
        }
    }
    Ok(())
}

/// ATA weights with an arbitrary logarithm. Any base gives the same
/// normalized weights, since the base only rescales every raw weight.
pub fn ata_weights_with_log<T: Scalar>(
    attention: &Tensor<T>,
    direction: AtaDirection,
    log: impl Fn(T) -> T,
) -> Result<AnchorWeights<T>, PoolingError> {
    let (h, k) = attention_dims(attention)?;
    check_stochastic(attention)?;
    let kf = count::<T>(k);
    let mut raw = vec![T::zero(); k];
    for head in 0..h {
        for i in 0..k {
            let row = attention.row(head * k + i);
            for (j, &a) in row.iter().enumerate() {
                let contribution = log(a * kf + T::one());
                match direction {
                    AtaDirection::Incoming => raw[j] += contribution,
                    AtaDirection::Literal => raw[i] += contribution,
                }
            }
        }
    }
    let total: T = raw.iter().copied().sum();
    if total <= T::zero() {
        return Err(PoolingError::Contract("anchor weights sum to zero".into()));
    }
    let normalized = raw.iter().map(|&w| w / total).collect();
    Ok(AnchorWeights { raw, normalized })
}

/// ATA weights with natural logarithm.
pub fn ata_weights<T: Scalar>(
    attention: &Tensor<T>,
    direction: AtaDirection,
) -> Result<AnchorWeights<T>, PoolingError> {
    ata_weights_with_log(attention, direction, T::ln)
}

fn hidden_dims<T: Scalar>(out: &EncoderOutput<T>) -> Result<(usize, usize), PoolingError> {
    match out.hidden.shape() {
        [k, d] => Ok((*k, *d)),
        other => Err(PoolingError::Shape(format!("hidden must be [K × d], got {other:?}"))),
    }
}

/// Weighted sum of hidden rows.
pub fn weighted_sum<T: Scalar>(hidden: &Tensor<T>, weights: &[T]) -> SentenceEmbedding<T> {
    let d = hidden.last_dim();
    let mut v = vec![T::zero(); d];
    for (i, &w) in weights.iter().enumerate() {
        for (o, &h) in v.iter_mut().zip(hidden.row(i)) {
            *o += w * h;
        }
    }
    SentenceEmbedding(v)
}

pub fn pool_ata<T: Scalar>(
    out: &EncoderOutput<T>,
    direction: AtaDirection,
) -> Result<SentenceEmbedding<T>, PoolingError> {
    let (k, _) = hidden_dims(out)?;
    let (_, ka) = attention_dims(&out.attention)?;
    if k != ka {
        return Err(PoolingError::Shape(format!(
            "hidden has {k} rows, attention covers {ka} tokens"
        )));
    }
    let w = ata_weights(&out.attention, direction)?;
    Ok(weighted_sum(&out.hidden, &w.normalized))
}

pub fn pool_mean<T: Scalar>(out: &EncoderOutput<T>) -> Result<SentenceEmbedding<T>, PoolingError> {
    let (k, _) = hidden_dims(out)?;
    let w = vec![T::one() / count::<T>(k); k];
    Ok(weighted_sum(&out.hidden, &w))
}

pub fn pool_last<T: Scalar>(out: &EncoderOutput<T>) -> Result<SentenceEmbedding<T>, PoolingError> {
    let (k, _) = hidden_dims(out)?;
    Ok(SentenceEmbedding(out.hidden.row(k - 1).to_vec()))
}

pub fn pool<T: Scalar>(out: &EncoderOutput<T>, cfg: &PoolingConfig) -> Result<SentenceEmbedding<T>, PoolingError> {
    match cfg.method {
        PoolingMethod::Mean => pool_mean(out),
        PoolingMethod::Last => pool_last(out),
        PoolingMethod::Ata => pool_ata(out, cfg.direction),
    }
}

/// Differentiable pooling of a tape-recorded encoder output into a `[1 × d]` row.
pub fn pool_on_tape<T: Scalar>(tape: &mut Tape<T>, out: TapeOutput, cfg: &PoolingConfig) -> Result<Var, PoolingError> {
    let k = tape.value(out.hidden).shape()[0];
    match cfg.method {
        PoolingMethod::Mean => {
            let s = tape.sum_rows(out.hidden)?;
            Ok(tape.scale(s, T::one() / count::<T>(k)))
        }
        PoolingMethod::Last => Ok(tape.gather_rows(out.hidden, &[k - 1])?),
        PoolingMethod::Ata => {
            let weights = ata_weights_on_tape(tape, out.attention, cfg.direction)?;
            let weights = if cfg.stop_gradient {
                tape.detach(weights)
            } else {
                weights
            };
            Ok(tape.matmul(weights, out.hidden)?)
        }
    }
}

/// Normalized ATA weights as a `[1 × K]` tape row.
pub fn ata_weights_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    attention: Var,
    direction: AtaDirection,
) -> Result<Var, PoolingError> {
    let (h, k) = attention_dims(tape.value(attention))?;
    check_stochastic(tape.value(attention))?;
    let flat = tape.reshape(attention, vec![h * k, k])?;
    let scaled = tape.scale(flat, count::<T>(k));
    let shifted = tape.add_scalar(scaled, T::one());
    let logs = tape.ln(shifted)?;
    let raw = match direction {
        AtaDirection::Incoming => tape.sum_rows(logs)?,
        AtaDirection::Literal => {
            let per_query = tape.sum_cols(logs)?;
            let grid = tape.reshape(per_query, vec![h, k])?;
            tape.sum_rows(grid)?
        }
    };
    let total = tape.sum_all(raw);
    Ok(tape.div_scalar(raw, total)?)
}
