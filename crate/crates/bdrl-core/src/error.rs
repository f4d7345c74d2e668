//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the distribution engine and experiment pipeline.
#[derive(Debug, Error)]
pub enum BdrlError {
    /// Two distributions were combined but live on different support grids.
    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    /// A probability vector violated its invariants beyond repairable drift.
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// A configuration value is out of range. `path` names the offending key.
    #[error("invalid config at `{path}`: {message}")]
    InvalidConfig { path: String, message: String },

    /// An operation that requires a nonempty collection received an empty one.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A numeric argument was NaN or infinite where a finite value is required.
    #[error("non-finite value for {0}")]
    NonFinite(String),

    /// Mismatched ids or shapes between cooperating structures.
    #[error("{0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl BdrlError {
    pub fn invalid_config(path: impl Into<String>, message: impl Into<String>) -> Self {
        BdrlError::InvalidConfig {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, BdrlError>;
