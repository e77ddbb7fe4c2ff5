use alloc::string::String;

/// Errors produced by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("type error: {0}")]
    Type(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite value produced by layer `{layer}`")]
    NonFinite { layer: String },
    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("undefined result: {0}")]
    Undefined(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("degenerate sample: {0}")]
    Degenerate(String),
}

pub type Result<T> = core::result::Result<T, Error>;
