//! Group distributionally robust learning (DRL).
//!
//! Aggregates per-source-group prediction models into a single robust
//! predictor. The aggregation weight solves a simplex-constrained quadratic
//! program in the cross-model Gram matrix evaluated under the target
//! covariate distribution; the Gram matrix itself is estimated either by a
//! plug-in sample average or by a cross-fitted, density-ratio-weighted
//! bias-corrected estimator.
//!
//! The crate ships:
//! - [`data`]: datasets, group structure, half-splits, CSV ingestion;
//! - [`learners`]: linear / lasso / random-forest base learners behind one
//!   predictor abstraction;
//! - [`ratio`]: density-ratio estimation via a source-vs-target logistic
//!   classifier;
//! - [`gamma`]: plug-in and bias-corrected Gram matrix estimators;
//! - [`weights`]: the simplex/ball-constrained quadratic weight solver;
//! - [`drl`]: the end-to-end estimator plus ERM and squared-loss baselines;
//! - [`eval`]: reward computation and worst-case evaluation;
//! - [`sim`]: seeded scenario generators and the experiment registry;
//! - [`federated`]: an in-process multi-site protocol simulation with a
//!   privacy audit.

pub mod data;
pub mod drl;
pub mod error;
pub mod eval;
pub mod federated;
pub mod gamma;
pub mod learners;
pub mod ratio;
pub mod seeds;
pub mod sim;
pub mod weights;

pub use error::{Error, Result};
