//! Reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Tape`] records operations as they execute (define-by-run). Parameters
//! live in a [`ParamStore`]; binding one onto the tape with [`Tape::param`]
//! makes its gradient flow back into the store on [`Tape::backward`]. Frozen
//! parameters are recorded as constants, which is how the adaptation phase
//! trains only its scale/shift vectors.
//!
//! Values are stored and multiplied at the tensor's element type (`f32` for
//! networks); gradients handed between nodes are `f64`.

pub mod checkpoint;
mod kernels;
mod param;
mod tape;
mod tensor;

pub use param::{Adam, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-positive variance {value} at element {index}; is the variance floor missing?")]
    NonPositiveVariance { index: usize, value: f64 },
    #[error("tape already consumed by backward; run a new forward pass")]
    TapeConsumed,
    #[error("variable does not belong to this tape")]
    UnknownVar,
    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
