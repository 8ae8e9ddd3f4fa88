//! Curvature tuning toolkit.
//!
//! Scalar math (activations, spline smoothing, the circle-error closed form)
//! is generic over [`Real`]; the tensor/network stack runs in `f64`. The type
//! aliases below fix the scalar to `f64` for everyday use.

pub mod activation;
pub mod autodiff;
pub mod circle;
pub mod curvature;
pub mod data;
pub mod error;
pub mod network;
pub mod rng;
pub mod scalar;
pub mod spline_vq;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::Tensor;

pub type CtuParams = activation::CtuParams<f64>;
pub type RawCtuParams = activation::RawCtuParams<f64>;
pub type MaxAffineSpline = spline_vq::MaxAffineSpline<f64>;
pub type SelectionVector = spline_vq::SelectionVector<f64>;
