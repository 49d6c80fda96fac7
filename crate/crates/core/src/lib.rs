//! Structured pruning, mixed-precision quantization and low-rank recovery
//! for small neural networks.

pub mod adapter;
pub mod autodiff;
pub mod bo;
pub mod checkpoint;
pub mod error;
pub mod io;
pub mod linalg;
pub mod mi;
pub mod models;
pub mod pipeline;
pub mod prune;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
