use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("poisoned gradient for parameter `{0}`")]
    PoisonedGradient(String),

    #[error("loss diverged (non-finite) at step {step}")]
    Diverged { step: usize },

    #[error("mask error: {0}")]
    Mask(String),

    #[error("corrupt bank: branch {branch_id}: {reason}")]
    CorruptBank { branch_id: String, reason: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("missing channel `{0}`")]
    MissingChannel(String),

    #[error("empty repetition group: {0}")]
    EmptyGroup(String),

    #[error("corrupt checkpoint: section `{section}`: {reason}")]
    CorruptCheckpoint { section: String, reason: String },

    #[error("checkpoint section `{section}`: {reason}")]
    CheckpointShape { section: String, reason: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("frozen tensor `{0}` was modified")]
    FrozenMutated(String),

    #[error("verification failed: {0}")]
    CheckFailed(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure class used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Io => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Usage => "usage",
            ErrorClass::Data => "data",
            ErrorClass::Numeric => "numeric",
            ErrorClass::Io => "io",
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Mask(_) => ErrorClass::Usage,
            Error::NonFinite(_)
            | Error::PoisonedGradient(_)
            | Error::Diverged { .. }
            | Error::CheckFailed(_) => ErrorClass::Numeric,
            Error::Io { .. } => ErrorClass::Io,
            _ => ErrorClass::Data,
        }
    }
}
