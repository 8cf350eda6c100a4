use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or grid shapes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Inconsistent model or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Out-of-domain scalar parameter (eps, ratio, step size, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// API misuse, e.g. backward from a non-scalar root.
    #[error("usage error: {0}")]
    Usage(String),

    /// Bad input data (labels, tiles, files with valid syntax but wrong content).
    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Binary container (checkpoint, netpbm) with wrong magic/version or truncated payload.
    #[error("format error: {0}")]
    Format(String),

    #[error("load error: {0}")]
    Load(String),

    /// Non-finite value encountered during optimisation.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
