//! Dense row-major tensors with a reverse-mode tape.
//!
//! [`Tensor`] is an immutable value type. [`Tape`] records primitive operations
//! over tensors and replays them backwards to produce gradients for every node
//! that was registered with [`Tape::param`].

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Layer-normalization epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

impl NumError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NumError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = NumError> = std::result::Result<T, E>;
