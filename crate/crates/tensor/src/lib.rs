//! Dense f64 tensor core with reverse-mode automatic differentiation.
//!
//! Everything is plain row-major `Vec<f64>` in safe Rust; no BLAS, no GPU.
//! A [`Graph`] records operations eagerly (tape style), [`Graph::backward`]
//! accumulates adjoints for every parameter reachable from a scalar root,
//! and [`AdamState`] applies the standard bias-corrected update.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use gradcheck::grad_check;
pub use graph::{Graph, NodeId};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors from tensor construction, graph building, and training.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: expected a 2-d tensor, got shape {shape:?}")]
    NotTwoDim { op: &'static str, shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("softmax over an empty axis (shape {shape:?})")]
    EmptySoftmax { shape: Vec<usize> },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{op}: index {index} out of range {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("ln of a non-positive value {value} at position {index}")]
    LnDomain { value: f64, index: usize },
    #[error("non-finite gradient for parameter '{param}' at coordinate {coord}")]
    NonFiniteGrad { param: String, coord: usize },
    #[error("non-finite value while probing '{param}' coordinate {coord}")]
    NonFiniteProbe { param: String, coord: usize },
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
