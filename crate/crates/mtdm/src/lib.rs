//! Temporal knowledge graph extrapolation with a memory-triggered dual-path
//! encoder and convolutional decoders, built on a small tape-based autodiff
//! core.

pub mod adam;
pub mod cache;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod scalar;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Scalar type used by training builds and the CLI.
pub type TrainScalar = f32;
/// Scalar type used by gradient checks and numeric tests.
pub type TestScalar = f64;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
