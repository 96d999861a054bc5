// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the steering lab.
#[derive(Debug, thiserror::Error)]
pub enum MesaError {
    /// A configuration value is missing, out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input has the wrong shape, length or contains non-finite values.
    #[error("input error: {0}")]
    Input(String),

    /// An artifact was produced against a different upstream artifact.
    #[error("stale artifact: {what} (expected {expected}, found {found})")]
    Stale {
        what: String,
        expected: String,
        found: String,
    },

    /// An artifact file is malformed.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Base-model training did not reach the configured floors.
    #[error("training failure: {0}")]
    TrainingFailure(String),

    /// A numerical or reproducibility check failed.
    #[error("check failed: {0}")]
    CheckFailed(String),

    /// Degenerate data for an operation that needs variation (e.g. empty curve).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MesaError>;

impl MesaError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Self::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the `mesa` binary.
    ///
    /// 2 = usage/configuration, 3 = staleness, 4 = failed check, 1 = anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Input(_) => 2,
            Self::Stale { .. } => 3,
            Self::CheckFailed(_) | Self::TrainingFailure(_) => 4,
            _ => 1,
        }
    }
}
