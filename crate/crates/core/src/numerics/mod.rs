//! Array arithmetic, reverse-mode differentiation, neural layers and AdamW.

mod array;
pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
mod params;
mod tape;

pub use array::{gemm, Array};
pub use params::{Gradients, Init, ParamId, Parameter, ParameterStore};
pub use tape::{NonFinite, Tape, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch (expected {expected:?}, found {found:?})")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{op}: axis {axis} invalid for rank {ndim}")]
    InvalidAxis { op: &'static str, axis: usize, ndim: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("{0}: empty shape")]
    EmptyShape(&'static str),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("parameter `{0}` registered twice")]
    DuplicateParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
