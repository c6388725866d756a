use autograd::AutogradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(ModelError::Parameter(msg.into()))
}
