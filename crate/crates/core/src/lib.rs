//! Reference-guided fixing of degraded synthesized views.

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod filters;
pub mod fixer;
pub mod image;
pub mod io;
pub mod metrics;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod warp;

pub use error::{Error, ErrorClass, Result};
pub use image::Image;
