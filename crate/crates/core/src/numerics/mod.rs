//! Dense tensors, tape-based reverse-mode differentiation, and the Adam
//! optimizer that every learnable module in the crate is built on.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_params, read_params, save_params, write_params, CHECKPOINT_VERSION};
pub use gradcheck::{check_param_grads, finite_diff_check, FdReport, FD_STEP};
pub use optim::{Adam, AdamConfig};
pub use params::{Mlp, ParamStore};
pub use tape::{log_sum_exp, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: {rows} rows cannot be split into groups of {group}")]
    BadGroup {
        op: &'static str,
        rows: usize,
        group: usize,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid learning rate {0}")]
    BadLearningRate(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
