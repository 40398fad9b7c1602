//! Small reverse-mode automatic differentiation engine over dense `f64`
//! tensors, with Adam and a binary checkpoint format.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{clip_global_norm, Adam};
pub use gradcheck::finite_difference_check;
pub use graph::{sigmoid, Gradients, Graph, OpKind, Var, COSINE_NORM_FLOOR, LOG_PROB_FLOOR};
pub use params::{ParamGroup, ParamId, ParameterStore, DISCRIMINATOR_PREFIX};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: index {index} out of range (len {len})")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
