//! Differentiable building blocks for longitudinal multi-view risk
//! prediction: a small tensor engine with reverse-mode autodiff, the
//! selective state-space scan, the VMRNN recurrent block, bilateral
//! asymmetry features, an additive hazard head and survival metrics.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common cases.

pub mod asymmetry;
pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod hazard;
pub mod io;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod scan;
pub mod tensor;
pub mod vmrnn;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
