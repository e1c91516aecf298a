//! Low-bit neural network training with ADMM.
//!
//! Weights of fully connected and convolutional layers are constrained to a
//! per-layer codebook `alpha * {codes}` (binary, ternary or shifted powers of
//! two). Training alternates an extragradient proximal step on the
//! continuous weights, a projection onto the codebook, and a dual update.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the CLI and model files use.

pub mod admm;
pub mod cli;
pub mod data;
pub mod error;
pub mod model_io;
pub mod network;
pub mod quantset;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Network = network::Network<f64>;
pub type Params = network::Params<f64>;
pub type Dataset = data::Dataset<f64>;
pub type QuantizedLayer = quantset::QuantizedLayer<f64>;
pub type LayerTarget = quantset::LayerTarget<f64>;
pub type AdmmState = admm::AdmmState<f64>;

pub use admm::{admm_train, AdmmConfig};
pub use model_io::QuantizedModel;
pub use quantset::{project_quantize, LayerPolicy, QuantizationSet};
