//! Small bidirectional transformer encoder.
//!
//! No causal mask is applied anywhere: every position attends to every other
//! position in every layer. The encoder exposes the final hidden states and
//! the last layer's per-head attention maps, which is everything pooling needs.

mod checkpoint;
mod model;
mod tokenizer;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use model::{Encoder, EncoderOutput, ParamSet, TapeOutput};
pub use tokenizer::{render_token, tokenize, wrap_query, TokenSequence, BOS, BYTE_VOCAB, EOS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::NumError;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("encoder contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    /// Desk configuration: 2 layers, 4 heads, width 64.
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            model_dim: 64,
            ff_dim: 128,
            vocab_size: BYTE_VOCAB,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let mut violated = Vec::new();
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("ff_dim", self.ff_dim),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                violated.push(format!("{name} must be positive"));
            }
        }
        if self.num_heads > 0 && !self.model_dim.is_multiple_of(self.num_heads) {
            violated.push(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.vocab_size < BYTE_VOCAB {
            violated.push(format!("vocab_size must be at least {BYTE_VOCAB}"));
        }
        if violated.is_empty() {
            Ok(())
        } else {
            Err(EncoderError::Config(violated.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Parameter count implied by the configuration.
    pub fn parameter_count(&self) -> usize {
        let (d, f) = (self.model_dim, self.ff_dim);
        let per_layer = 2 * d // ln1
            + 4 * (d * d + d) // q, k, v, o
            + 2 * d // ln2
            + d * f + f + f * d + d; // feed-forward
        self.vocab_size * d + self.max_seq_len * d + self.num_layers * per_layer + 2 * d
    }
}
