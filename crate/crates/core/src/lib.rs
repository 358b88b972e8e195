//! Variable-rate lossy image codec built on a multi-scale invertible
//! transform with a spatial-channel context entropy model, gain units for
//! continuous rate control, and a deterministic range coder.
//!
//! The numeric core is generic over the scalar type: f32 for production
//! encode/decode/training, f64 for gradient and invertibility checks.
//! Concrete aliases live at the crate root.

pub mod error;
pub mod graph;
pub mod inn;
pub mod linalg;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
