//! Dense and sparse tensor primitives with exact reverse-mode gradients.
//!
//! Every primitive exists twice: as a plain forward function in [`ops`]
//! and as a recorded operation on a [`Tape`], whose backward pass is
//! hand-derived per operation. The plain functions are what the evaluation
//! path uses; the tape is what training uses.

mod adam;
mod init;
pub mod ops;
mod sparse;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use init::{glorot_uniform, glorot_bound};
pub use ops::Activation;
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComputeError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("tensor of shape {rows}x{cols} cannot hold {len} values")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("invalid CSR structure: {0}")]
    InvalidSparse(String),
    #[error("softmax over an empty mask")]
    EmptyMask,
    #[error("mask index {index} out of range for length {len}")]
    MaskOutOfRange { index: usize, len: usize },
    #[error("dropout rate must lie in [0, 1), got {0}")]
    BadDropoutRate(f64),
    #[error("backward requires a scalar loss, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("variable {0} was never recorded on this tape")]
    UnknownVar(usize),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(usize),
    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
}
