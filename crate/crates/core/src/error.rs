use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum GhiveError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("fold {fold} has {rows} rows but at least {needed} are required")]
    FoldTooSmall {
        fold: &'static str,
        rows: usize,
        needed: usize,
    },

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl GhiveError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, GhiveError::Numerical(_) | GhiveError::DegenerateCovariance(_))
    }
}

pub type Result<T> = std::result::Result<T, GhiveError>;
