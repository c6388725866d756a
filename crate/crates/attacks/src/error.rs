use autograd::AutogradError;
use enresnet::ModelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, AttackError>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(AttackError::Parameter(msg.into()))
}
