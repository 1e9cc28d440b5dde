use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("checkpoint parse error at byte {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DiffError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DiffError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;
