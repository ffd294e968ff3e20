//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient samples for group ({location}, {posture}): {count} < {min}")]
    InsufficientSamples {
        location: String,
        posture: String,
        count: usize,
        min: usize,
    },
    #[error("no channel model entry for ({location}, {posture})")]
    MissingChannelEntry { location: String, posture: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}:{row}: {msg}")]
    CsvSchema {
        path: String,
        row: usize,
        msg: String,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("timestamps not monotone for subject {subject} at {location} (row {row})")]
    NonMonotoneTimestamps {
        subject: String,
        location: String,
        row: usize,
    },
    #[error("subject-disjoint split leaves {side} side empty")]
    EmptySplit { side: &'static str },
    #[error("non-finite loss while training client {client}")]
    NonFiniteLoss { client: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no delivered updates")]
    NoUpdates,
    #[error("aggregation weights must sum to 1, got {0}")]
    InvalidWeights(f64),
    #[error("unknown policy {0:?}")]
    UnknownPolicy(String),
    #[error("brute-force enumeration is limited to 16 clients, got {0}")]
    EnumerationTooLarge(usize),
    #[error("invariant breach: {0}")]
    InvariantBreach(String),
    #[error("round {round}: {source}")]
    InRound {
        round: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attach the round number in which the error occurred.
    pub fn in_round(self, round: usize) -> Error {
        Error::InRound {
            round,
            source: Box::new(self),
        }
    }

    /// Exit-code class for the CLI contract: 2 = data/config error,
    /// 3 = runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InsufficientSamples { .. }
            | Error::MissingChannelEntry { .. }
            | Error::InvalidConfig(_)
            | Error::CsvSchema { .. }
            | Error::EmptyDataset
            | Error::NonMonotoneTimestamps { .. }
            | Error::EmptySplit { .. }
            | Error::UnknownPolicy(_)
            | Error::Json(_) => 2,
            Error::InRound { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
