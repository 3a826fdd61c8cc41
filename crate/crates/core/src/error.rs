use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("dataset record {index}: {msg}")]
    Dataset { index: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("scene generation: {0}")]
    Scene(String),
    #[error(transparent)]
    Tensor(#[from] smn_tensor::TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
