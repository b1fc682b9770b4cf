use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("event log is empty: {0}")]
    EmptyLog(String),
    #[error("unknown {kind} id {id}")]
    UnknownEntity { kind: &'static str, id: u32 },
    #[error("non-finite loss at epoch {epoch}; try a smaller learning rate")]
    Divergence { epoch: usize },
    #[error("gradient check failed for {model}: relative error {error:e}")]
    GradCheck { model: String, error: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid model file: {0}")]
    ModelFormat(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 config, 2 data, 3 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Divergence { .. } | Error::GradCheck { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
