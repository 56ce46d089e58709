use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument to {op}: {message}")]
    InvalidArgument { op: &'static str, message: String },

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("sharing invariant violated for `{tensor}`: {message}")]
    InvariantViolation { tensor: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse category used by callers that map errors to process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad configuration or arguments.
    Config,
    /// Unreadable or malformed input data.
    Data,
    /// Numeric failure: non-finite values, degenerate geometry, broken invariants.
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidArgument { .. } => ErrorClass::Config,
            Error::Data(_) | Error::Io(_) => ErrorClass::Data,
            Error::ShapeMismatch { .. }
            | Error::DegenerateVector(_)
            | Error::Numeric(_)
            | Error::InvariantViolation { .. } => ErrorClass::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
