use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, dimensions or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed data: bad labels, ragged frame counts, unparsable files.
    #[error("input error: {0}")]
    Input(String),

    /// API misuse, e.g. backward from a non-scalar or an empty batch.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training diverged or another failure that is not the caller's fault.
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Usage(_) => 1,
            Error::Io { .. } | Error::Runtime(_) => 2,
        }
    }
}
