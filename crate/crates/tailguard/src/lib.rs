//! Loss-weighted resampling for time-series forecasting.
//!
//! `tailguard` trains small forecasting models (a linear last-value-head
//! model and a one-hidden-layer MLP) while choosing which windows to train
//! on. Per-sample weights come from a Gaussian bump over z-normalized
//! running losses, so training can focus on a chosen loss band instead of
//! the raw loss scale. The [`theory`] module is a numerical lab for the
//! side effect that makes this safe: reweighting a heavy-tailed loss
//! distribution this way yields a distribution whose exponential moments
//! converge.
//!
//! Modules:
//!
//! - [`dataset`]: CSV ingestion, chronological splits, train-fit scaling,
//!   sliding windows, random-erase augmentation.
//! - [`model`]: forecasters, exact gradients, SGD/Adam steps, checkpoints.
//! - [`sampler`]: weight maintenance, alias-method drawing, InfoBatch and
//!   uniform baselines.
//! - [`theory`]: adaptive quadrature, normalization constants, truncated
//!   exponential moments, tail verdicts, Hill estimator.
//! - [`trainer`]: the epoch loop, smoothed early stopping, metrics, grid
//!   search, run artifacts.
//! - [`cli`]: the `tailguard` command-line interface.

pub mod cli;
pub mod dataset;
pub mod model;
pub mod sampler;
pub mod theory;
pub mod trainer;

/// Compiles and runs every Rust block in the guide under `book/` as a
/// doc-test, so `cargo test --doc` fails when the book drifts from the
/// API.
#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/windows-and-splits.md")]
    pub mod windows_and_splits {}
    #[doc = include_str!("../../../book/src/gaussian-weights.md")]
    pub mod gaussian_weights {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/tail-diagnostics.md")]
    pub mod tail_diagnostics {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    pub mod command_line {}
    #[doc = include_str!("../../../book/src/artifacts.md")]
    pub mod artifacts {}
}
