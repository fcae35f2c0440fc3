//! Continuous normalizing flows for Boltzmann-distribution sampling, trained
//! by conditional flow matching and fine-tuned with path-gradient estimators
//! of the forward KL divergence.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, the precision every gradient check
//! and file format in this crate assumes.

pub mod batch;
mod binio;
pub mod cnf;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod scalar;
pub mod targets;
pub mod train;
pub mod variancelab;
pub mod vectorfield;

pub use error::{FlowError, Result};
pub use scalar::Real;

/// Engine version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Batch = batch::SampleBatch<f64>;
pub type Params = vectorfield::FieldParams<f64>;
pub type Probe = vectorfield::ProbeVector<f64>;
pub type FlowResult = cnf::FlowResult<f64>;
pub type Dataset = targets::Dataset<f64>;
pub type GradEstimate = train::GradEstimate<f64>;
pub type OptimizerState = train::OptimizerState<f64>;
