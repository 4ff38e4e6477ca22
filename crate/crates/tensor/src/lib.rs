//! Minimal f64 tensors with reverse-mode automatic differentiation.
//!
//! Backward rules are expressed with the same differentiable operations as
//! the forward pass, so [`grad`] with `create_graph = true` yields gradients
//! that can be differentiated again (needed for gradient penalties).

pub mod gradcheck;
pub mod nn;
mod ops;
pub mod optim;
mod tensor;

pub use ndarray;
pub use tensor::{grad, grad_enabled, no_grad, Data, GradModeGuard, Tensor};
