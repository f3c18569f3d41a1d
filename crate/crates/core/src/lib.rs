//! Density-aware single-image dehazing at desk scale.
//!
//! The crate bundles a two-branch dehazing network built around haze density
//! differences between the input and a generated proposal image, a synthetic
//! haze data generator based on the atmospheric scattering model, the full
//! loss and metric suite, and a deterministic training harness.

pub mod error;
pub mod gradcheck;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
