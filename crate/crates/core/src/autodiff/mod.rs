//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly as it is evaluated. Calling
//! [`Tensor::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients into the leaves created with [`Graph::param`].

mod array;
pub mod gradcheck;
mod graph;
mod kernels;
mod ops;

pub use array::Array;
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use graph::{CustomOp, Graph, InterpMode, Tensor};
pub use ops::concat;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor belongs to a different graph")]
    ForeignTensor,
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

#[cfg(test)]
mod tests;
