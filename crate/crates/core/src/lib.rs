//! Numerical laboratory for normalization placed immediately after linear
//! maps.
//!
//! The crate has three layers:
//!
//! - deterministic dense numerics ([`linalg`], [`rng`], [`spectral`], [`fd`])
//! - the normalized-linear operator with every closed-form derivative, plus
//!   curvature experiments over it ([`simplenorm`], [`quadratic`],
//!   [`curvature`], [`verify`])
//! - a small decoder-only transformer with three switchable block schemes
//!   and a deterministic training loop ([`model`], [`train`])
//!
//! Verification paths run in f64 and keep exact formulas (no epsilon in the
//! normalization denominator); the training path runs in f32 with a guarded
//! denominator. See the crate-level tests for the acceptance suite.

pub mod curvature;
pub mod error;
pub mod fd;
pub mod linalg;
pub mod model;
pub mod quadratic;
pub mod real;
pub mod rng;
pub mod simplenorm;
pub mod spectral;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use rng::RngStream;
