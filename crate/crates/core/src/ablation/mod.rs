//! Design-sweep grids: expansion into model configs, parallel toy-task
//! runs, CSV results and Pareto ranking.

mod csv;
mod grid;
mod rank;
mod run;

pub use csv::*;
pub use grid::*;
pub use rank::*;
pub use run::*;
