//! Tensor, autodiff and layer substrate.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
mod tensor;

pub use graph::{Graph, Gradients, PassCounter, Var};
pub use params::{Adam, AdamConfig, ParamBuilder, ParamId, ParamStore};
pub use tensor::Tensor;
