use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HvplError>;

#[derive(Debug, Error)]
pub enum HvplError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("svd did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("class coverage error: {needed} classes but only {sampled} videos requested")]
    Coverage { needed: usize, sampled: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("graph is not connected ({components} components)")]
    Disconnected { components: usize },

    #[error("invalid tree structure: {0}")]
    Structure(String),

    #[error("invalid SSM parameterization: {0}")]
    Parameterization(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HvplError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        HvplError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HvplError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HvplError::Numeric(_) | HvplError::NoConvergence { .. } => 2,
            _ => 1,
        }
    }
}
