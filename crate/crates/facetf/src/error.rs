//! Crate-wide error type with a stable mapping to process exit codes.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad command line.
    #[error("{0}")]
    Usage(String),

    /// Bad configuration value, malformed input file, or invalid request.
    #[error("{0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Divergence or degenerate numerics (NaN loss, zero-norm embedding).
    #[error("{0}")]
    Numerical(String),

    /// Shapes or formats that do not fit together, such as evaluating a
    /// checkpoint against images of a different size.
    #[error("{0}")]
    Compat(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code reported by the command-line tool: 2 for usage,
    /// config, and I/O problems, 3 for numerical failures, 4 for
    /// compatibility mismatches.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Io { .. } => 2,
            Error::Numerical(_) => 3,
            Error::Compat(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
