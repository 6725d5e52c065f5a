//! Semisupervised nonparametric signal detection.
//!
//! A labeled background sample and an unlabeled experimental sample are
//! compared through the modal structure of Gaussian product-kernel density
//! estimates. The crate provides:
//!
//! * [`dataset`]: CSV ingest, standardization, projection, splitting and a
//!   Gaussian-mixture generator for synthetic scenarios.
//! * [`kde`]: the product-kernel estimator with exact gradient and Hessian,
//!   plus normal-scale and plug-in bandwidths.
//! * [`modal`]: mean-shift mode seeking, mode merging and partitions.
//! * [`agreement`]: Fowlkes-Mallows, adjusted Rand and Jaccard indices.
//! * [`bwselect`]: the best-undersmoothing bandwidth search.
//! * [`varselect`]: relevance counting with integrated-squared-difference
//!   permutation tests.
//! * [`modetest`]: bootstrap intervals for Hessian eigenvalues at modes.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agreement;
pub mod bwselect;
pub mod dataset;
pub mod error;
pub mod kde;
pub mod modal;
pub mod modetest;
pub mod seed;
pub mod varselect;

pub use error::{Error, Result};

/// Library version, recorded in run reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
