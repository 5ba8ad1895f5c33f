use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("unknown {kind} id '{id}' at {path}:{line}")]
    Vocabulary {
        kind: &'static str,
        id: String,
        path: String,
        line: usize,
    },

    #[error("construction failed: {0}")]
    Construction(String),

    #[error("config key '{key}': {msg}")]
    Config { key: String, msg: String },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code for the command line: 2 for data problems, 3 for
    /// numeric failures. Usage errors (1) are decided before any work runs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Config { .. } => 1,
            _ => 2,
        }
    }
}
