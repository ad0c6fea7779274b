use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SmithError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SmithError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("every key is masked for a query row in attention group {group}")]
    DegenerateAttention { group: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("document `{0}` has no non-empty sentence blocks")]
    EmptyDocument(String),

    #[error("{0}")]
    InvalidInput(String),

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl SmithError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SmithError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        SmithError::Io {
            context: context.into(),
            source,
        }
    }
}
