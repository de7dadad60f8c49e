use thiserror::Error;

use crate::decoupling::ParseError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite loss {loss} at step {step}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("service request failed: {reason}")]
    Transport { reason: String, raw: Option<String> },

    #[error("response still malformed after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: usize,
        last: ParseError,
        raw: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error at {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
