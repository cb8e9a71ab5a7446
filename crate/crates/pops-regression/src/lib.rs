//! Misspecification-aware linear regression.
//!
//! An underparametrized linear surrogate fit to near-deterministic data
//! fails in a specific way: no parameter vector explains every row, and the
//! usual Bayesian posterior, concentrated near the loss minimizer, reports
//! error bars that say nothing about where the surrogate is simply wrong.
//! This crate keeps the cheap linear fit but widens the posterior until it
//! covers, for every training row, some parameter vector that reproduces
//! that row exactly.
//!
//! The pipeline:
//!
//! - [`ridge`] — weighted least squares with a vanishing ridge prior; the
//!   baseline fit θ*_L, its posterior shape matrix, and the epistemic
//!   (data-scarcity) uncertainty.
//! - [`pointwise`] — for each training row, the parameter vector closest to
//!   θ*_L that interpolates that row exactly: a rank-one correction. The N
//!   corrections are the raw material for everything below.
//! - [`hypercube`] — an axis-aligned box, in the singular directions of the
//!   corrections, that contains them all. Its prediction envelope gives
//!   worst-case bounds; training targets never fall outside.
//! - [`ensemble`] — a discrete mixture over the corrections with weights
//!   chosen so the family is calibrated against the training residuals.
//! - [`refmin`] — a plain gradient-descent reference minimizer of the
//!   mixture cross-entropy, for desk-scale validation of the closed forms.
//! - [`metrics`] — envelope violation, observed/predicted MAE ratio,
//!   Gaussian coverage, and overlay histograms.
//! - [`dataset`] — CSV loading, weighted rows, splits, and deterministic
//!   synthetic engines with controlled misspecification.
//! - [`model`] — a versioned JSON artifact that round-trips every
//!   prediction bit for bit.
//!
//! All randomness flows through explicit ChaCha seeds; identical inputs give
//! bitwise-identical outputs everywhere, including the saved model files.

pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod hypercube;
pub mod metrics;
pub mod model;
pub mod pointwise;
pub mod refmin;
pub mod ridge;

pub use error::{Error, Result};
