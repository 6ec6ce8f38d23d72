//! Minimal dense tensor kernel with reverse-mode differentiation.

pub mod gradcheck;
mod graph;
pub mod io;
mod optim;
mod param;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub(crate) use graph::downsample_mean;

#[cfg(test)]
mod tests;
