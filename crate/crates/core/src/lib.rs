//! Deterministic federated-learning simulation with privacy-preserving
//! update sanitization.
//!
//! Each communication round broadcasts the global weights, trains every
//! client locally, turns the local result into an update, sanitizes that
//! update (top-q sparsification, percentile-derived clipping threshold,
//! l2 projection, Laplace noise scaled to the threshold) and folds the
//! sanitized updates back into the global model with data-weighted
//! averaging. Two baselines share the same pipeline: a non-private mode and
//! a static mode with a frozen clipping threshold.
//!
//! The learning task is a synthetic multi-site binary segmentation problem
//! solved by a small per-pixel MLP trained with soft Dice loss, Adam and a
//! cosine-annealed learning rate.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod params;
pub mod privacy;
pub mod rng;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use params::ParamVector;
pub use privacy::{PrivacyConfig, PrivacyMode, SanitizationTrace};
