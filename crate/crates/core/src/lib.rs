//! Protective self-adaptive structured pruning.
//!
//! An iterative prune/train engine for convolutional networks: per-layer
//! pruning ratios follow each layer's measured weight sparsity, and pruned
//! filters that receive pulse gradients through batch-norm are detected
//! after a probe step and restored from a pre-pruning backup.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two instantiations.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod pruning;
pub mod reconstruction;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{build_model, Architecture, ConvSpec, ModelSpec, Network};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;

/// Version string embedded in every artifact.
pub const TOOL_VERSION: &str = concat!("psap ", env!("CARGO_PKG_VERSION"));
