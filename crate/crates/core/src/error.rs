use thiserror::Error;

pub type Result<T> = std::result::Result<T, CpoeError>;

#[derive(Debug, Error)]
pub enum CpoeError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("block {block} is not positive definite during factorisation")]
    BlockNotPositiveDefinite { block: usize },

    #[error("pattern mismatch: {0}")]
    PatternMismatch(String),

    #[error("{what} too large: {size} exceeds the cap of {cap}")]
    TooLarge {
        what: &'static str,
        size: usize,
        cap: usize,
    },

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("optimisation failed: {0}")]
    Optimization(String),
}

impl CpoeError {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        CpoeError::DimensionMismatch(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        CpoeError::InvalidParameter(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CpoeError::InvalidConfig(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        CpoeError::Parse {
            line,
            msg: msg.into(),
        }
    }
}
