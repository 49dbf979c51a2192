use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input too short: need at least {needed} time points, got {got}")]
    InputTooShort { needed: usize, got: usize },

    /// A caller broke an API precondition (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("context overflow: {len} positions exceed the cap of {cap}")]
    ContextOverflow { len: usize, cap: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("content error: {0}")]
    Content(String),

    #[error("synthetic spec error: {0}")]
    Spec(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by bad input data rather than by code or config.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Content(_) | Error::Io(_) | Error::Json(_) | Error::Split(_)
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Numerical(_) | Error::Oracle(_)
        )
    }
}
