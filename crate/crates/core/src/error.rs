use std::path::PathBuf;

/// Errors produced anywhere in the ranking pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("empty action set: every candidate is already placed")]
    EmptyActionSet,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("session {session}: {msg}")]
    Validation { session: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
