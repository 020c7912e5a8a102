//! Deterministic reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] records every operation as it runs. Values are always
//! materialized eagerly; [`Graph::backward`] replays the record in reverse
//! and accumulates gradients into every node that requires one.
//!
//! ```
//! use pivad_core::tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq, None).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

mod gradcheck;
mod graph;
mod value;

pub use gradcheck::{grad_check, relative_error, GradReport};
pub use graph::{gelu_scalar, sigmoid_scalar, Graph, Var};
pub use value::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: domain error, {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("loss must hold a single value, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; call zero_grad first")]
    BackwardTwice,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{0}")]
    InvalidArgument(String),
}
