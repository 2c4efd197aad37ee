//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records one forward pass. Parameters live in a [`ParamStore`]
//! and are loaded into the graph by name; [`Graph::backward`] returns their
//! gradients keyed by the same names, which [`AdamW`] consumes.

mod check;
mod graph;
mod optim;
mod params;
mod tensor;

pub use check::{grad_check, grad_check_with, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::{BlobType, Param, ParamStore, CHECKPOINT_VERSION};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
