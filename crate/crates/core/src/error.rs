use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training halted at step {step} ({phase}): {message}")]
    Diverged { step: u64, phase: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI, one per error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::Config(_) | Error::InvalidArgument(_) => 3,
            Error::Parse { .. } | Error::Checkpoint(_) => 4,
            Error::Shape(_) | Error::Empty(_) => 5,
            Error::ContractViolation(_) => 6,
            Error::NumericalOverflow(_) | Error::Diverged { .. } => 7,
        }
    }
}

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::Shape(what.into())
}
