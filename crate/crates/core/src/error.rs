use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{path}:{line}: {msg}")]
    Data { path: String, line: usize, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("unknown ablation key `{key}`; valid keys: {valid}")]
    UnknownAblation { key: String, valid: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for usage errors, 3 for data/contract errors, 4 for numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::Numeric(_) => 4,
            Error::UnknownAblation { .. } | Error::Usage(_) => 2,
            _ => 3,
        }
    }
}
