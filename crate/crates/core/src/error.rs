use std::path::PathBuf;

use thiserror::Error;

/// One pass of the iterative user/item frequency filter.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FilterStep {
    pub iteration: usize,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("dataset too sparse: nothing survives filtering ({} iterations)", trace.len())]
    TooSparse { trace: Vec<FilterStep> },

    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for bad inputs, 2 for numeric and training failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Training { .. } | Error::Evaluation(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
