//! Label-model engine for multi-resolution weak supervision.
//!
//! Sequences of `T` binary element labels are voted on by noisy sources at
//! element, window, or sequence resolution. From vote agreements alone this
//! crate estimates each source's conditional accuracy table and each
//! correlated pair's joint table, then computes exact posteriors over label
//! configurations to emit probabilistic training labels at any resolution.
//!
//! The pipeline, end to end:
//!
//! 1. [`model`] — task layout, sources, dependency graph, prior, votes.
//! 2. [`moments`] — observable vote-product statistics with tie-group pooling.
//! 3. [`estimator`] — closed-form moment recovery (triplet systems, sign
//!    recovery, products-to-joints solves, Bayes).
//! 4. [`sgd`] — the same moment constraints optimized directly by projected
//!    gradient descent.
//! 5. [`inference`] — exact posteriors, label emission, baselines, metrics.
//! 6. [`synth`] — generators and latent-label oracles for validation and the
//!    scaling/benefit experiments.
//! 7. [`cli`] — the `check`/`fit`/`predict`/`eval`/`simulate` driver.

pub mod cli;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod kahan;
pub mod model;
pub mod moments;
pub mod sgd;
pub mod synth;

pub use error::{Error, ErrorCode, Result, Warning};
