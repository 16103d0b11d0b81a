//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! All model code builds its forward pass out of [`Var`] operations on a fresh
//! [`Tape`]; one call to [`Tape::backward`] then yields every gradient.

mod check;
mod tape;
mod tensor;

pub use check::{finite_diff_check, scalar_fn};
pub use tape::{AttentionMask, Gradients, Tape, Var};
pub use tensor::Tensor;
pub(crate) use tape::softmax_in_place;

/// Clamp floor for probabilities inside logarithms (`0·log 0 = 0`).
pub const PROB_EPS: f64 = 1e-12;
/// Variance stabilizer for layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for extent {extent} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

#[cfg(test)]
mod tests;
