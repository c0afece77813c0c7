use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("character {0:?} is not in the task vocabulary")]
    OutOfVocabulary(char),

    #[error("token id {0} is not in the task vocabulary")]
    UnknownTokenId(usize),

    #[error("enumeration budget exceeded: {vocab}^{horizon} sequences > cap {cap}")]
    BudgetExceeded {
        vocab: usize,
        horizon: usize,
        cap: usize,
    },

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("rejection sampling retained no demonstrations; increase n_responses_per_prompt, prompt_count or max_new_tokens")]
    EmptyFilteredSet,

    #[error("self-check failed: {0}")]
    Verification(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::File {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configs, flags, data files)
    /// rather than failures during a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            LabError::InvalidConfig(_)
                | LabError::InvalidInput(_)
                | LabError::OutOfVocabulary(_)
                | LabError::UnknownTokenId(_)
                | LabError::BudgetExceeded { .. }
                | LabError::Json(_)
                | LabError::File { .. }
                | LabError::Checkpoint(_)
        )
    }
}
