use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("malformed data: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
