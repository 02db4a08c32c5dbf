//! Drivers around the landmark network: synthetic data, dataset
//! manifests, training, evaluation, FLOP accounting and gradient checks.

pub mod augment;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod flops;
pub mod gradsuite;
pub mod manifest;
pub mod synth;
pub mod train;

pub use error::{HarnessError, Result};
