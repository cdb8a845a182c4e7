//! Kernel two-sample testing with learned deep kernels, applied to
//! retrospective change-point detection in multivariate time series.
//!
//! The kernel is an RBF kernel composed with a GRU encoder. It is trained to
//! maximize a test-power surrogate against an auxiliary sequence generator,
//! then used to score the discrepancy between adjacent windows of a series.

pub mod cli;
pub mod datagen;
pub mod diffcore;
mod error;
pub mod evalmod;
pub mod kernels;
pub mod mmdstats;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod trainer;
pub mod tstest;

pub use diffcore::Matrix;
pub use error::{Error, Result};
