//! Hybrid CNN/transformer landmark detector on a small CPU autodiff engine.
//!
//! The crate is layered bottom-up: [`tensor`] and [`kernels`] hold dense
//! arrays and raw numeric kernels, [`tape`] records differentiable
//! operations, [`nn`] binds named parameters to a tape, and the model code
//! ([`bra`], [`blocks`], [`net`]) is written against that binding context.

pub mod blocks;
pub mod bra;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod heatmap;
pub mod kernels;
pub mod net;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
