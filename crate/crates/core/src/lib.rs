//! Compressed-sensing unmixing of closely spaced point sources.
//!
//! The crate covers the whole pipeline: a sub-pixel scene model with a
//! Gaussian point spread function and block-averaging measurement, a
//! synthetic dataset format, classical ISTA/ADMM solvers, a small
//! reverse-mode autodiff engine, the unfolded DSCS network built on it,
//! a trainer, and the CSO-mAP evaluation protocol.

// Parameter checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod grid;
pub mod net;
pub mod operator;
pub mod pipeline;
pub mod recon;
pub mod rng;
pub mod scene;
pub mod solvers;
pub mod train;

pub use error::{Error, Result};
pub use grid::Grid;
