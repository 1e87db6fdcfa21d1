use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. Variants are grouped so callers can map
/// them onto coarse failure classes (configuration, data validation,
/// numerical).
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("utterance {index}: tokens/slots length mismatch ({tokens} tokens vs {slots} tags)")]
    LengthMismatch {
        index: usize,
        tokens: usize,
        slots: usize,
    },

    #[error("utterance {index}: invalid tag sequence at position {position}: {message}")]
    BioViolation {
        index: usize,
        position: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    /// Process exit code the CLI maps this error onto: 1 for configuration
    /// problems, 2 for data validation problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownLabel(_) | Error::Shape(_) | Error::EmptyInput(_) => 1,
            Error::Io { .. }
            | Error::MalformedRecord { .. }
            | Error::LengthMismatch { .. }
            | Error::BioViolation { .. } => 2,
            Error::NonFinite(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
