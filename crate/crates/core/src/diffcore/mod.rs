//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records one forward pass; [`ParamStore`] owns the trainable tensors
//! between passes and receives the accumulated gradients; [`Adam`] updates them.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{log_sum_exp, sigmoid, Graph, NodeId};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    Construction { shape: Vec<usize>, len: usize },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}
