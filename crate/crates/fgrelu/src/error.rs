use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not line up for an operation. The message names both shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A scalar argument is outside its allowed range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A computation-graph contract was broken (unbound placeholder, bad node ref).
    #[error("graph error: {0}")]
    Graph(String),

    /// An operation contract was violated (e.g. backward on a non-scalar output).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An input value is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A data file is malformed; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A network description is internally inconsistent.
    #[error("invalid network spec: {0}")]
    Spec(String),

    /// Training produced non-finite values; the message names the parameter.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Bad command-line or experiment-config input.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
