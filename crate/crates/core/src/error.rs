use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("class index {value} out of range for {classes} classes")]
    ClassOutOfRange { value: u8, classes: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("malformed image: {0}")]
    Image(String),

    #[error("pixel subset contains no labelled pixels")]
    EmptySubset,

    #[error("no class has any supporting pixels")]
    NoSupervision,

    #[error("no active class prompts")]
    NoActivePrompts,

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

pub(crate) fn dim_mismatch(msg: impl Into<String>) -> Error {
    Error::DimMismatch(msg.into())
}
