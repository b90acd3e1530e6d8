//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A patch/window specification that cannot be satisfied.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// Malformed or unusable input data.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite value produced during numeric evaluation.
    #[error("numeric error in {context} at step {step}")]
    Numeric { context: String, step: usize },

    /// Bad experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint file could not be read or written.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training loss became non-finite; the model holds the last good parameters.
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
