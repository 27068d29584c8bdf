//! Fairness-aware graph learning.
//!
//! The crate trains small graph neural networks under a three-part objective
//! (prediction loss, a Laplacian upper bound on the similarity-weighted Gini
//! coefficient for individual fairness, and a Nash-social-welfare product for
//! group fairness, balanced by gradient normalisation) and audits arbitrary
//! embeddings with Gini, trace, group-disparity, equal-opportunity and
//! classification metrics.
//!
//! Modules, bottom up:
//!
//! - [`tensor`] and [`autodiff`]: dense matrices and a reverse-mode tape.
//! - [`graph`] and [`similarity`]: graphs, splits, group partitions,
//!   similarity sets and Laplacian operations.
//! - [`metrics`]: the audit suite.
//! - [`models`], [`losses`], [`gradnorm`], [`trainer`]: the training stack.
//! - [`experiments`]: synthetic benchmarks, clustering, perturbations, sweeps
//!   and report writers.

pub mod autodiff;
pub mod error;
pub mod experiments;
pub mod gradnorm;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod similarity;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
