use thiserror::Error;

use crate::tensor::Shape4;

/// Errors produced anywhere in the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape4, right: Shape4 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid configuration: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<crate::model::Violation>),

    #[error("state error: {0}")]
    State(String),

    #[error("infeasible target: {target} MACs is below the one-block-per-stage floor of {floor} MACs")]
    Infeasible { target: u64, floor: u64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for configuration and validation failures (CLI exit code 2).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Invalid(_) | Error::Infeasible { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
