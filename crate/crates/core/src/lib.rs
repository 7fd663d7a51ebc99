//! Metric learning encoding models.
//!
//! Learns a weighted norm `||p||_W = sqrt(p^T W p)` over per-feature
//! distance vectors `p` so that, across pairs of stimuli, the predicted
//! distances rank the same way as distances between the stimuli's neural (or
//! model) representations. `W` is kept symmetric positive definite through a
//! Cholesky parametrization; an unconstrained symmetric variant serves as the
//! feature-reweighted RSA baseline with interactions.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`data`] | feature tables, representation matrices, elementary distances |
//! | [`pairs`] | pair sampling, on-the-fly batches, batch-size selection |
//! | [`softrank`] | isotonic regression, soft ranks, exact and soft Spearman |
//! | [`metric`] | parametrizations, predictions, analytic gradients |
//! | [`train`] | AdamW loop, early stopping, evaluation, cross-validation |
//! | [`importance`] | permutation importance with interactions, Frobenius, weighted tau |
//! | [`synth`] | planted-metric synthetic datasets |
//! | [`cli`] | the `mlem` command line |
//!
//! ```
//! use mlem::metric::{build_weights, MetricParams, ModelVariant};
//! use nalgebra::DMatrix;
//!
//! let params = MetricParams::new(DMatrix::zeros(2, 2), ModelVariant::Mlem).unwrap();
//! let w = build_weights(&params);
//! assert!(w.min_eigenvalue() > 0.0);
//! ```

pub mod cli;
pub mod data;
pub mod error;
pub mod importance;
pub mod io;
pub mod metric;
pub mod pairs;
pub mod rng;
pub mod softrank;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
