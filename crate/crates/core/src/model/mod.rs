//! Model configuration, config documents and the full network.

mod config;
mod document;
mod network;

pub use config::*;
pub use document::*;
pub use network::*;
