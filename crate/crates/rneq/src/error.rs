//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type. The CLI maps these onto process exit codes:
/// invalid arguments exit 1, format errors exit 2, failed checks exit 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad shapes, out-of-range indices, invalid configurations.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed files (dataset records, weight containers).
    #[error("format error: {0}")]
    Format(String),

    /// A guarded computation would exceed its configured size cap.
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    /// A report over a batch where every sample was degenerate.
    #[error("empty report: {0}")]
    EmptyReport(String),

    /// Operation has no defined result for the requested variant.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A tolerance or consistency check failed.
    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
