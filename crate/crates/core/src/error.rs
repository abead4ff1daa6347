//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller broke an operation's precondition (shapes, ranges, sums).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage needs an artifact that has not been produced yet.
    #[error("missing prerequisite: {what} (run stage `{stage}` first)")]
    MissingPrerequisite { what: String, stage: String },

    /// NaN/Inf or a diverging optimizer.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Activation samples missing for a (layer, group) pair.
    #[error("empty calibration set for layer {layer}, group {group}")]
    EmptyCalibration { layer: usize, group: usize },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    /// Artifact produced under a different configuration hash.
    #[error("artifact {path} was produced by config {found}, expected {expected}")]
    HashMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::HashMismatch { .. } => 2,
            Error::MissingPrerequisite { .. } => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
