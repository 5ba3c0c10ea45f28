//! Weakly supervised audio-visual anomaly detection on precomputed features.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`diffcore`]: dense arrays and reverse-mode differentiation.
//! - [`featureio`]: feature/manifest/mask formats, resampling and a seeded
//!   synthetic dataset generator.
//! - [`avmodel`]: the detector graph and its checkpoint format.
//! - [`losses`]: Top-K BCE, MIL alignment, NCE, focal and uncertainty-weighted
//!   distillation objectives.
//! - [`trainer`]: optimisation loops, evaluation and run reports.
//! - [`metrics`]: frame-level AP and segment mAP over IoU thresholds.
//! - [`gradsuite`]: finite-difference checks of every op, block and objective.

pub mod avmodel;
pub mod diffcore;
pub mod error;
pub mod featureio;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
