//! Training library for classifiers that learn to ignore image
//! backgrounds: layer-wise relevance propagation runs as a differentiable
//! mirror network during training, and relevance falling outside
//! segmentation masks is penalized, so the trained classifier behaves as
//! if its inputs were segmented.
//!
//! All numeric code is generic over the scalar type: `f32` for training
//! speed, `f64` for verification and property tests. Concrete aliases are
//! exported at the crate root.

pub mod autodiff;
pub mod classifier;
pub mod error;
pub mod io;
pub mod kernels;
pub mod loss;
pub mod lrp;
pub mod metrics;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Network32 = classifier::Network<f32>;
pub type Network64 = classifier::Network<f64>;
