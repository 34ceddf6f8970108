//! Minimal reverse-mode differentiation: dense tensors, an eager tape with
//! the operators the network needs, and a finite-difference checker.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("node {0} has not been evaluated on this tape")]
    GraphNotEvaluated(usize),
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}
