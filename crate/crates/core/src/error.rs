use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{kernel}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        kernel: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{kernel}: expected {expected} input(s), got {got}")]
    Arity {
        kernel: String,
        expected: String,
        got: usize,
    },

    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("loss is not recorded on this tape")]
    NotOnTape,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: {component} is not finite")]
    Diverged { epoch: usize, component: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
