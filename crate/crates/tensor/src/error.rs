use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum TensorError {
    /// Operand shapes are incompatible with the operation.
    #[error("{op}: dimension error: {detail}")]
    Dimension { op: &'static str, detail: String },
    /// The API was called out of contract (non-scalar backward, missing gradient, ...).
    #[error("usage error: {0}")]
    Usage(String),
}

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension {
        op,
        detail: detail.into(),
    })
}
