use thiserror::Error;

pub type Result<T, E = FgdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FgdError {
    /// Shapes or axes that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A numeric parameter outside its valid range (temperature, weights, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("contract error: {0}")]
    Contract(String),

    /// The finite-difference oracle could not produce a usable value.
    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FgdError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        FgdError::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        FgdError::Parameter(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        FgdError::Config(msg.into())
    }
}
