use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::Checkpoint;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("architecture parse error at token `{token}`: {reason}")]
    Architecture { token: String, reason: String },

    #[error("ingestion error in {}: {reason}", path.display())]
    Ingest { path: PathBuf, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training hit a non-finite loss or gradient. `last_good` is the state
    /// before the offending step.
    #[error("training aborted at epoch {epoch}, iteration {iteration}: {diagnostic}")]
    TrainingAborted {
        epoch: usize,
        iteration: usize,
        diagnostic: String,
        last_good: Box<Checkpoint>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
