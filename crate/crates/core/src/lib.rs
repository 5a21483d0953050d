//! Lossless codec for high bit-depth depth maps.
//!
//! A depth map is split into MSB/LSB planes, coded lossily by a learned
//! hyperprior transform coder, and the integer residual is coded with a
//! per-pixel Laplace mixture whose parameters come from the lossy
//! reconstruction and a pseudo-residual obtained by running the lossy coder a
//! second time on its own output.

pub mod bitsplit;
pub mod checkpoint;
pub mod codec;
pub mod depth_io;
pub mod entropy;
pub mod error;
pub mod likelihood;
pub mod lossy;
pub mod model;
pub mod nn;
pub mod residual;
pub mod scalar;
pub mod selftest;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, Model32, Model64, ModelConfig};
pub use scalar::{DType, Scalar};

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
