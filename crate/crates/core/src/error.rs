use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VeilError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VeilError {
    #[error("dimension error: {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl VeilError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        VeilError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VeilError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable class, used by the CLI's one-line error output.
    pub fn class(&self) -> &'static str {
        match self {
            VeilError::Dimension { .. } => "dimension",
            VeilError::Config(_) => "config",
            VeilError::Numerical(_) => "numerical",
            VeilError::Data(_) | VeilError::Parse { .. } => "data",
            VeilError::Checkpoint(_) => "checkpoint",
            VeilError::Io { .. } => "io",
        }
    }
}
