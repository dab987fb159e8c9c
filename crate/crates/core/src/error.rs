use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = GmrlError> = std::result::Result<T, E>;

/// Coarse classification used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum GmrlError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl GmrlError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            GmrlError::Config(_) => ErrorKind::Config,
            GmrlError::Data(_) | GmrlError::Json(_) => ErrorKind::Data,
            GmrlError::Io { .. } => ErrorKind::Io,
            GmrlError::ShapeMismatch { .. }
            | GmrlError::InvalidShape(_)
            | GmrlError::NonFinite { .. }
            | GmrlError::NonScalarLoss(_)
            | GmrlError::Numeric(_) => ErrorKind::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GmrlError::Io {
            path: path.into(),
            source,
        }
    }
}
