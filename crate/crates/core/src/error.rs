use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library. Each variant maps to a distinct CLI exit code.
#[derive(Debug, Error)]
pub enum SarmError {
    #[error("format error: {0}")]
    Format(String),

    #[error("parse error in segment `{segment}`: {reason}")]
    Parse { segment: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SarmError {
    pub(crate) fn parse(segment: impl Into<String>, reason: impl Into<String>) -> Self {
        SarmError::Parse {
            segment: segment.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable kind tag.
    pub fn kind(&self) -> &'static str {
        match self {
            SarmError::Format(_) => "format",
            SarmError::Parse { .. } => "parse",
            SarmError::Config(_) => "config",
            SarmError::Numeric(_) => "numeric",
            SarmError::Shape(_) => "shape",
            SarmError::MissingFile(_) => "missing_file",
            SarmError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, SarmError>;
