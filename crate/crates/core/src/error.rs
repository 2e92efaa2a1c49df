use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("{kind} not found: {id}")]
    NotFound { kind: &'static str, id: String },

    #[error("integrity error for {id}: expected {expected}, found {found}")]
    Integrity {
        id: String,
        expected: String,
        found: String,
    },

    #[error("object rejected by datatype {datatype}: {}", violations.join("; "))]
    Rejected {
        datatype: String,
        violations: Vec<String>,
    },

    #[error("docking rejected: {}", reasons.join("; "))]
    Docking { reasons: Vec<String> },

    #[error("dependency cycle: {0}")]
    Cycle(String),

    #[error("invalid transition for task {task}: {from} -> {to}")]
    InvalidTransition {
        task: String,
        from: String,
        to: String,
    },

    #[error("service contract violated: {0}")]
    Contract(String),

    #[error("service source error: {0}")]
    Source(String),

    #[error("no qualified resource for task {task}")]
    NoResource { task: String, report: String },

    #[error("staging failed: {0}")]
    Staging(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("correlation undefined for constant input")]
    UndefinedCorrelation,

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn not_found(kind: &'static str, id: impl Into<String>) -> Self {
        Error::NotFound {
            kind,
            id: id.into(),
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn storage(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }
}
