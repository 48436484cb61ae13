//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An image violated its invariants (bad dimensions, pixel out of [0,1], ...).
    #[error("invalid image: {0}")]
    InvalidImage(String),

    /// A landmark set violated its invariants (too few points, collinear, bad groups).
    #[error("invalid landmarks: {0}")]
    InvalidLandmarks(String),

    /// A linear system was singular or nearly singular.
    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    /// Tensor/image shapes do not chain or do not match.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An index was outside its valid range.
    #[error("index out of range: {0}")]
    OutOfRange(String),

    /// Bad configuration value or unsatisfiable request.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file had the wrong magic, version, or structure.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
