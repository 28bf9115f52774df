//! Semi-supervised learning when the chance that a label is observed
//! depends on the label itself.
//!
//! The missing-data mechanism is the vector `phi` with
//! `phi_k = P(label observed | y = k)`. This crate provides:
//!
//! - [`mechanism`]: the observed log-likelihood with its derivatives in
//!   `phi`, a method-of-moments estimator and a constrained
//!   maximum-likelihood estimator;
//! - [`risk`]: complete-case, inverse-propensity-weighted, classical SSL and
//!   debiased SSL risks with analytic gradients;
//! - [`train`]: minibatch training on those risks, and evaluation;
//! - [`mcartest`]: a likelihood-ratio test of MCAR labels;
//! - [`scenario`]: synthetic data and label-masking processes.
//!
//! Class indices are 0-based in memory and 1-based in files (see
//! [`format`]).
//!
//! With the default `parallel` feature, per-sample evaluations run on the
//! rayon thread pool. Reductions use a fixed chunking and order, so results
//! are bit-identical with and without the feature and for any thread count.

// Validators use negated comparisons so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod data;
pub mod error;
pub mod format;
pub mod mcartest;
pub mod mechanism;
pub mod model;
pub mod par;
pub mod risk;
pub mod rng;
pub mod scenario;
pub mod study;
pub mod train;

pub use data::{Dataset, Mechanism, SealedTruth};
pub use error::{Error, Result};
pub use model::{Architecture, Gradient, ModelParams, UnlabeledLoss};
