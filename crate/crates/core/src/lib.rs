//! Workbench for the DriveNeXt camera-encoder family.

pub mod ablation;
pub mod analysis;
pub mod blocks;
pub mod error;
pub mod layers;
pub mod model;
pub mod plot;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
