use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("sample index {index} out of range for dataset of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("batch size {batch} exceeds dataset {dataset:?} of size {size}")]
    BatchTooLarge { batch: usize, dataset: String, size: usize },

    #[error("bad dataset directory: {0}")]
    BadStore(String),

    #[error(transparent)]
    Tensor(#[from] tensorcore::TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SceneError>;
