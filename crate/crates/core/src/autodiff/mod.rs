//! Dense tensors with a tape-based reverse-mode differentiation engine.
//!
//! Usage pattern: create a [`Tape`] per step, register parameters with
//! [`Tape::leaf`], build the forward pass from the op methods, then call
//! [`Tape::backward`] on a scalar loss.

mod gradcheck;
mod real;
mod suite;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_detailed, relative_error, GradCheck};
pub use real::Real;
pub use suite::primitive_suite;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFiniteResult { op: &'static str },
    #[error("loss is not a node of this tape")]
    DetachedLoss,
}
