use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },

    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
