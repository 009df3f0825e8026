//! Simulated 3D-parallel model runtime with interpretability hooks.
//!
//! Workers run as threads over a DP×TP×PP device mesh and exchange tensors
//! through rendezvous collectives. Hooks see full, unsharded activations.

pub mod cli;
pub mod error;
pub mod hooks;
pub mod induction;
pub mod lenses;
pub mod mesh;
pub mod parallel;
pub mod profiler;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
