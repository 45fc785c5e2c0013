//! Deployment-oriented quantized ×3 single-image super-resolution.
//!
//! The crate covers the full pipeline at desk scale: a multi-branch
//! re-parameterizable student network, analytic fusion of every branch into
//! a single-convolution deploy graph, a three-stage loss curriculum with
//! frequency-domain and confidence-weighted distillation supervision,
//! quantization-aware training on the fused graph, and a simulated INT8
//! inference path that is checked against the float path bit by bit.

pub mod config;
pub mod container;
pub mod data;
pub mod dct;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod losses;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
