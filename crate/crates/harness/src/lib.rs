pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod train;

pub use error::{HarnessError, Result};
