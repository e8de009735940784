//! Dense `f64` tensors and a define-by-run tape for reverse-mode gradients.
//!
//! A fresh [`Tape`] is built for every forward pass. Parameters enter the
//! tape as leaves, so a network whose gradients are computed but never
//! applied behaves as a fixed, differentiable function.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{GradStore, NodeId, Op, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: expected a different number of inputs, got {got}")]
    Arity { op: &'static str, got: usize },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("split sizes {sizes:?} do not partition width {width}")]
    InvalidSplit { sizes: Vec<usize>, width: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },
    #[error("node is not recorded on this tape")]
    UnknownNode,
}
