//! Minimal reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! The graph is rebuilt on every forward pass. Trainable arrays live in [`Param`]s
//! and enter the graph through [`Param::var`]; [`Var::backward`] returns gradients
//! keyed by parameter. [`Var::detach`] and [`no_grad`] cut gradient flow.

mod array;
mod error;
mod float;
mod graph;
mod ops;

pub use array::Array;
pub use error::{Result, TensorError};
pub use float::{gemm, Float};
pub use graph::{grad_enabled, no_grad, Grads, Param, ParamId, Var};
pub use ops::{cat_channels, sum_vars};
