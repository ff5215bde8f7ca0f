//! Multi-view consistency learning for text-supervised semantic segmentation.
//!
//! A Siamese pair of grouping vision encoders (student trained by gradient
//! descent, teacher by exponential moving average) is trained against a
//! small text transformer with three contrastive objectives: cross-view
//! segment consistency, one-caption-to-two-views contrast, and multi-prompt
//! contrast. Trained models segment images zero-shot by comparing segment
//! embeddings with embeddings of class-name prompts.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for common uses.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod gradcheck;
pub mod error;
pub mod image;
pub mod losses;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod segment;
pub mod synth;
pub mod tensor;
pub mod tensor_file;
pub mod text;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
