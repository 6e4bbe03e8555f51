//! Adam with warmup, the synthetic heatmap task, the training loop and the
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod toy;
mod train;

pub use adam::*;
pub use gradcheck::*;
pub use toy::*;
pub use train::*;
