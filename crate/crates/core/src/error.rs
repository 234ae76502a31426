use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scene infeasible: placed {placed} of {requested} objects within the retry budget")]
    SceneInfeasible { placed: usize, requested: usize },

    #[error("no {family} caption with the requested truth value found in {attempts} attempts")]
    SceneUnusable { family: String, attempts: usize },

    #[error("family {family}: {source}")]
    FamilyGeneration {
        family: String,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: u64 },

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("corrupt record {index}: {detail}")]
    CorruptRecord { index: usize, detail: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
