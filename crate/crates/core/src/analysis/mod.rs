//! Analytic cost models: parameters, MACs, receptive field, and the
//! iso-complexity block solver. One MAC is two FLOPs.

mod cost;
mod iso;
mod receptive;

pub use cost::*;
pub use iso::*;
pub use receptive::*;
