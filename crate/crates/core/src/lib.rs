//! Radiance fields with distilled features, patch-similarity masks and
//! guided repainting of masked regions.

pub mod dataset;
pub mod error;
pub mod field;
pub mod guidance;
pub mod losses;
pub mod mask;
pub mod math;
pub mod occupancy;
pub mod pipeline;
pub mod planes;
pub mod renderer;

pub use error::{Error, Result};
