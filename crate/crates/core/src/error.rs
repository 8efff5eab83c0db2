use thiserror::Error;

pub type Result<T> = std::result::Result<T, RepsError>;

#[derive(Debug, Error)]
pub enum RepsError {
    /// A scalar argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("posterior table is empty: {0}")]
    EmptyPosterior(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RepsError {
    pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(RepsError::DimensionMismatch { context, expected, got })
        }
    }
}
