use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error in {what} at byte offset {offset}: {detail}")]
    Format {
        what: String,
        offset: u64,
        detail: String,
    },
    #[error("checkpoint {field}: {detail}")]
    Checkpoint { field: &'static str, detail: String },
    #[error("training diverged at epoch {epoch}, step {step}: non-finite values")]
    Divergence { epoch: usize, step: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Autograd(#[from] autograd::AutogradError),
    #[error(transparent)]
    Model(#[from] enresnet::ModelError),
    #[error(transparent)]
    Attack(#[from] attacks::AttackError),
    #[error(transparent)]
    Transport(#[from] transport::TransportError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Config(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
