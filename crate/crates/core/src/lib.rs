//! Group-aware hierarchical graph network for multi-horizon city air-quality
//! forecasting.
//!
//! The forecaster encodes each city's recent hourly history with multi-head
//! self-attention, softly assigns cities to a small number of learned groups,
//! encodes directed correlations between groups, and runs message passing on
//! both the group graph and the distance-thresholded city graph before a
//! decoder with the same structure emits all forecast horizons at once.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root pick a concrete precision.

pub mod autodiff;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod grouping;
pub mod hier_mp;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub use model::{Model, ModelConfig, Variant};
pub use train::{PreparedData, TrainConfig};

/// Double-precision model.
pub type Model64 = Model<f64>;
/// Single-precision model.
pub type Model32 = Model<f32>;
/// Double-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = Tensor<f32>;
