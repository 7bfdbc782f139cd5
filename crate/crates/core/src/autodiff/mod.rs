//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is a tape rebuilt for every evaluation. Leaves are either
//! constants ([`Graph::input`]) or parameters pulled from a [`ParamStore`];
//! [`Graph::backward`] returns gradients for both.

mod graph;
pub mod gradcheck;
mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, NodeId, OpKind, ParamId, ParamStore};
pub use tensor::Tensor;

/// Added to the variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Sigmoid logits are clamped to `[-SIGMOID_CLAMP, SIGMOID_CLAMP]`.
pub const SIGMOID_CLAMP: f64 = 30.0;

/// Scalar logistic function with the same clamping as [`Graph::sigmoid`].
pub fn sigmoid(x: f64) -> f64 {
    kernels::sigmoid_clamped(x)
}
