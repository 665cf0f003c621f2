use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("update stamped with tau {tau} is ahead of server epoch {t}")]
    FutureUpdate { tau: u64, t: u64 },

    #[error("stale update in synchronous round: tau {tau}, server epoch {t}")]
    StaleInSync { tau: u64, t: u64 },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("weights file: {0}")]
    WeightsFormat(String),

    #[error("protocol error [{code}]: {detail}")]
    Protocol { code: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn protocol(code: &str, detail: impl Into<String>) -> Self {
        Error::Protocol {
            code: code.to_string(),
            detail: detail.into(),
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Diverged(_) | Error::NonFinite { .. })
    }
}
