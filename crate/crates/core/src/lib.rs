//! Gradient-leakage attacks on miniature vision transformers.
//!
//! The crate is generic over the floating-point type ([`Scalar`]); the
//! aliases at the root fix it to `f64`, which every experiment uses.

pub mod attacks;
pub mod autodiff;
pub mod defenses;
pub mod error;
pub mod image;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Image = image::Image<f64>;
pub type ModelParams = model::ModelParams<f64>;
pub type GradientSnapshot = model::GradientSnapshot<f64>;
pub type VisionTransformer = model::VisionTransformer<f64>;
pub type ReconstructionResult = attacks::ReconstructionResult<f64>;
pub type MetricReport = metrics::MetricReport<f64>;
