use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes. The CLI maps each one to a fixed exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Format,
    Reference,
    Numeric,
    Io,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Format => "format",
            ErrorCategory::Reference => "reference",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Io => "io",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("diff parse error in hunk {hunk:?}: {reason}")]
    DiffParse { hunk: String, reason: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("header requests {requested} bytes, above the {cap} byte cap")]
    TooLarge { requested: u64, cap: u64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("reference error: {0}")]
    Reference(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::InsufficientData(_) | Error::UndefinedMetric(_) => {
                ErrorCategory::Config
            }
            Error::DiffParse { .. }
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::Truncated { .. }
            | Error::DimensionMismatch(_)
            | Error::TooLarge { .. }
            | Error::Format(_)
            | Error::Json(_) => ErrorCategory::Format,
            Error::Reference(_) => ErrorCategory::Reference,
            Error::Shape(_) | Error::Numeric(_) => ErrorCategory::Numeric,
            Error::Io(e) if e.kind() == io::ErrorKind::NotFound => ErrorCategory::Reference,
            Error::Io(_) => ErrorCategory::Io,
        }
    }
}
