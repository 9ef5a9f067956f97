use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DmtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DmtError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },
    #[error("format error in {}: {reason}", file.display())]
    Format { file: PathBuf, reason: String },
    #[error("ingestion error in {}: {reason}", file.display())]
    Ingestion { file: PathBuf, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DmtError {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        DmtError::Validation(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DmtError::Config(msg.into())
    }

    pub(crate) fn format(file: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        DmtError::Format {
            file: file.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-parsable category, used by the CLI's one-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            DmtError::Validation(_) => "validation",
            DmtError::Index { .. } => "index",
            DmtError::Format { .. } => "format",
            DmtError::Ingestion { .. } => "ingestion",
            DmtError::Config(_) => "config",
            DmtError::UndefinedMetric(_) => "undefined-metric",
            DmtError::Io(_) => "io",
            DmtError::Json(_) => "json",
        }
    }
}
