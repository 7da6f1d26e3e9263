use thiserror::Error;

/// Error type shared by the whole crate.
#[derive(Debug, Error)]
pub enum FlowError {
    /// Operand shapes are inconsistent for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value is invalid (even mask size, indivisible dims, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// backward() was called twice on the same tape without a reset.
    #[error("backward() called twice on a consumed tape")]
    TapeConsumed,

    /// Training diverged; carries step, learning rates and gradient norms.
    #[error("training aborted: {0}")]
    Train(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file did not match its expected binary/text layout.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, FlowError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> FlowError {
    FlowError::Shape {
        op,
        detail: detail.into(),
    }
}
