use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("step {step} is outside the schedule (total {total})")]
    StepOutOfRange { step: usize, total: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("not enough eligible videos: need {needed}, found {eligible} of {total}")]
    NotEnoughVideos {
        needed: usize,
        eligible: usize,
        total: usize,
    },

    #[error("parameter mismatch at `{name}`: expected {expected}, found {found}")]
    ParamMismatch {
        name: String,
        expected: String,
        found: String,
    },

    #[error("{path}: record {record}: {msg}")]
    Format {
        path: PathBuf,
        record: String,
        msg: String,
    },

    #[error("training diverged at step {step}: {last_row}")]
    Diverged { step: usize, last_row: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
