use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Arguments violate a precondition (shape, range, size).
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// An operation was called in the wrong state (e.g. backward without forward).
    #[error("invalid state: {0}")]
    State(String),

    /// The data cannot support the requested operation (missing treatment groups, ...).
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// Training produced a non-finite loss or parameter.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateData(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Strips stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}
