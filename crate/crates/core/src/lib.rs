//! Test-time adaptation for 3D point-cloud classification by sampling
//! variation and weight averaging.
//!
//! The pipeline: generate several FPS samplings of each test batch, adapt
//! only the normalization-layer affine parameters of a frozen classifier on
//! each sampling by entropy minimization, then average the adapted
//! parameters before predicting.

pub mod adaptation;
pub mod corruptions;
pub mod data;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
