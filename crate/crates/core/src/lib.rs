//! Multiplication-free neural networks.
//!
//! Weights are constrained to signed sums of at most `k` powers of two (or to
//! `±1`), so every weight application at inference time is a shift or a
//! handful of shifts and adds. The crate covers the whole life cycle: training
//! with real-valued shadow weights, final projection onto the codebook, a
//! packed on-disk format, shift-add inference in floating and fixed point, and
//! storage/energy cost estimates.
//!
//! The numeric core is generic over [`Scalar`]; `f32` aliases below are what
//! the deployment paths and file formats use.

pub mod costmodel;
pub mod data;
pub mod error;
pub mod format;
pub mod fsutil;
pub mod inference;
pub mod network;
pub mod quantization;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod variant;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use variant::{ModelVariant, WeightConstraint};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Parameters32 = network::Parameters<f32>;
pub type Parameters64 = network::Parameters<f64>;
pub type QuantizedModel32 = inference::QuantizedModel<f32>;
