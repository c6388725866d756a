use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("degenerate batch: batch normalization needs at least 2 values per channel, got {per_channel}")]
    DegenerateBatch { per_channel: usize },
}

pub type Result<T> = std::result::Result<T, AutogradError>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(AutogradError::Parameter(msg.into()))
}
