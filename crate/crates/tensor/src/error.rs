use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("degenerate box in {op}: [{x1}, {y1}, {x2}, {y2}] has no area")]
    DegenerateBox {
        op: &'static str,
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("variables belong to different tapes")]
    TapeMismatch,
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad tensor encoding: {0}")]
    Encoding(String),
}

impl TensorError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
