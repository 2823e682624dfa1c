//! Dense uncertainty estimation at desk scale.
//!
//! An ensemble-based conditional latent variable model with Langevin
//! posterior inference, single-pass aleatoric/predictive uncertainty heads
//! trained with consistency losses, baseline estimators, and dense
//! calibration metrics, all exercised on a synthetic segmentation benchmark
//! with a known label-noise field.

pub mod baselines;
pub mod checkpoint;
pub mod diff;
pub mod elvm;
pub mod error;
pub mod instrument;
pub mod metrics;
pub mod synth;
pub mod trainer;
pub mod uncertainty;

pub use diff::{Shape3, Tensor, TensorMap};
pub use error::{DuqError, Result};
