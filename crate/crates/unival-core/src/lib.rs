//! Unified multimodal sequence-to-sequence modelling on a desk-scale budget.
//!
//! One encoder-decoder transformer consumes text, images, video clips and
//! audio grids through lightweight convolutional encoders and emits discrete
//! tokens for every task. The crate also ships the training machinery
//! (multitask mixtures, curriculum stages, AdamW, EMA) and a weight-space
//! merging toolkit (interpolation, uniform soups, fusing, ratatouille),
//! all verified against synthetic scene tasks with exact oracles.
//!
//! The numeric core is generic over the scalar type: training and
//! checkpoints run in [`f32`]; gradient-checking oracles re-run identical
//! graphs in [`f64`].

pub mod encoders;
pub mod error;
pub mod eval;
pub mod generate;
pub mod gradcheck;
pub mod kernels;
pub mod merge;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tasks;
pub mod trainer;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor, the storage type of checkpoints.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor used by verification oracles.
pub type Tensor64 = tensor::Tensor<f64>;
/// Training-precision parameter store.
pub type ParamStore32 = params::ParamStore<f32>;
