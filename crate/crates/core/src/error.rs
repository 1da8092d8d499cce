use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the segmentation pipeline.
///
/// Variants are grouped by how the CLI reports them: `Parameter` maps to a
/// configuration failure (exit 2), the data-shaped variants map to exit 3,
/// and anything else is treated as internal (exit 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Input files or arrays that violate a structural contract
    /// (length mismatches, non-finite samples, bad magic bytes, ...).
    #[error("malformed input: {0}")]
    Malformed(String),

    /// A user-supplied parameter outside its documented range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Structurally valid data on which the requested operation is
    /// undefined (uniform histogram, empty class, too-small ROI, ...).
    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error category: 2 config, 3 data, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) => 2,
            Error::Io { .. } | Error::Malformed(_) | Error::Degenerate(_) => 3,
            Error::Internal(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
