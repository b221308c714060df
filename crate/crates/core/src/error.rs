use mmfuse_numcore::NumError;
use thiserror::Error;

use crate::experts::{ExpertError, Modality};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("modality {0} is not configured in the aggregator")]
    UnconfiguredModality(Modality),
    #[error("{modality} has dim {actual}, aggregator expects {expected}")]
    InputDim {
        modality: Modality,
        expected: usize,
        actual: usize,
    },
    #[error("span [{beg}, {end}) outside positional table range (max_seconds {max})")]
    SpanOutOfRange { beg: u32, end: u32, max: u32 },
    #[error("video has no tokens in any configured modality")]
    AllModalitiesEmpty,
    #[error("{what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("dataset error: {0}")]
    Data(String),
    #[error("non-finite loss at stage {stage}, step {step}; last good checkpoint: {last_good}")]
    NonFiniteLoss {
        stage: String,
        step: u64,
        last_good: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl Error {
    /// Process exit code for the error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Io { .. } => 4,
            Error::Expert(_)
            | Error::Data(_)
            | Error::UnconfiguredModality(_)
            | Error::InputDim { .. }
            | Error::SpanOutOfRange { .. }
            | Error::AllModalitiesEmpty => 5,
            Error::Checkpoint(_) => 6,
            Error::NonFiniteLoss { .. } | Error::Num(_) => 7,
            Error::Dimension { .. } | Error::Invalid(_) => 1,
        }
    }
}
