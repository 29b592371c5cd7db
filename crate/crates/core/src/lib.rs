//! Probabilistic forecasting of longitudinal blood-work trajectories and
//! detection of progression events.
//!
//! The forecaster is an LSTM whose hidden state parameterises a conditional
//! Gaussian-Bernoulli restricted Boltzmann machine; it is trained with
//! contrastive divergence and sampled with Gibbs chains. A small LSTM
//! classifier flags progression events on observed or forecasted series.
//! Numerical kernels are generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix the precision used by the pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod annotator;
pub mod cohort;
pub mod config;
pub mod crbm;
pub mod error;
pub mod eval;
pub mod forecaster;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod scalar;
pub mod seeds;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Forecasting model in training precision.
pub type Forecaster = forecaster::ForecasterParams<f64>;
/// Forecasting model for single-precision sampling.
pub type ForecasterF32 = forecaster::ForecasterParams<f32>;
pub type Annotator = annotator::AnnotatorParams<f64>;
pub type Lstm = nn::Lstm<f64>;
pub type Dense = nn::Dense<f64>;
pub type ConditioningNets = crbm::ConditioningNets<f64>;
pub type CrbmCond = crbm::CrbmCond<f64>;
pub type TransformParams = preprocess::TransformParams<f64>;
