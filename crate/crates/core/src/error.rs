use alloc::string::String;

/// Failure categories shared by every stage of the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    /// Tensor dimensions disagree with what an operation expects.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A caller-provided value is outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),
    /// Inconsistent or out-of-range configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// The backbone cannot provide the requested output.
    #[error("unsupported capability: {0}")]
    Capability(String),
}

pub type Result<T> = core::result::Result<T, Error>;
