use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("solution diverged at step {step}")]
    Divergence { step: usize },
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("malformed field dump: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, TransportError>;
