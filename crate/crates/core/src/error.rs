use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },

    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },

    #[error("invalid instance `{id}`: {message}")]
    InvalidInstance { id: String, message: String },

    #[error("trace `{id}`: {message}")]
    TraceShape { id: String, message: String },

    #[error("trace `{id}` has {found} epochs, expected {expected}")]
    InconsistentEpochs {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("missing replacement output for instance `{0}`")]
    MissingReplacement(String),

    #[error("task `{0}` has fewer than 2 instances, no flip donor available")]
    NoFlipDonor(String),

    #[error("instance `{0}` has no task_id")]
    MissingTaskId(String),

    #[error("instance `{0}` is not in the dataset")]
    UnknownInstance(String),

    #[error("{0}")]
    EmptySet(String),

    #[error("task `{task}` has duplicate match key (instruction, input) in the {version} version")]
    AmbiguousMatch { task: String, version: &'static str },

    #[error("task `{0}`: {1}")]
    Assembly(String, String),

    #[error("epoch {epoch}, instance `{id}`: non-finite training loss")]
    NonFiniteLoss { epoch: usize, id: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Io { .. } => 3,
            _ => 4,
        }
    }
}
