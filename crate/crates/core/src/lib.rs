//! RT-DETRv2 inference from first principles.
//!
//! The pipeline runs a ResNet-50-vd backbone, the hybrid encoder
//! (single-scale self-attention plus top-down / bottom-up CSP fusion),
//! top-k query selection over all pyramid locations, optional denoising
//! queries, and six decoder blocks built on multi-scale deformable
//! attention.
//!
//! Every stage is generic over the element type ([`Scalar`]); the aliases
//! below name the two instantiations.

mod error;
mod scalar;
mod tensor;

pub mod kernels;
pub mod reference;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

pub mod backbone;
pub mod config;
pub mod decoder;
pub mod denoising;
pub mod encoder;
pub mod model;
pub mod msda;
pub mod postprocess;
pub mod query;
pub mod trace;
pub mod weights;

pub use backbone::FeaturePyramid;
pub use config::ModelConfig;
pub use model::{Model, ModelOutput};
pub use trace::ShapeLog;
