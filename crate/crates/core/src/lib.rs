//! Differentiable object counting toolkit.

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod raster;
pub mod targets;

pub use error::{Error, Result};
