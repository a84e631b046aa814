//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters live
//! in a [`ParamStore`] that the graph borrows read-only; [`Graph::backward`]
//! returns a [`Gradients`] value which the caller adds into the store with
//! [`ParamStore::accumulate`]. Sequence operators accept `[T, C]` or
//! `[B, T, C]` tensors; row-wise operators treat every leading axis as rows.

mod gradcheck;
mod graph;
mod lstm;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, grad_check_params_smooth, grad_check_smooth, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, Var, BN_EPS};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
