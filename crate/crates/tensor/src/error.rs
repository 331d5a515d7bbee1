use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op} expects a scalar (1-element) tensor, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    #[error("backward already ran on this tape; rewind before calling it again")]
    BackwardTwice,

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("non-finite {what} in parameter '{name}'")]
    NonFinite { what: &'static str, name: String },

    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;
