// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the leakage-mitigation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensor shapes are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A tensor had the wrong rank or size for the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument was out of its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Optimizer or graph state was not as required (e.g. missing gradient).
    #[error("state error: {0}")]
    State(String),

    /// A pool could not supply the requested number of unique items.
    #[error("capacity exceeded: requested {requested}, capacity {capacity}")]
    Capacity { requested: usize, capacity: usize },

    /// Datasets are inconsistent with each other.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Input data is unusable (single class, missing span, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Model input is invalid (token out of vocabulary, too long, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A lookup by id failed.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },

    /// A probe collapsed to a zero direction.
    #[error("degenerate probe: weight vector has zero norm")]
    DegenerateProbe,

    /// An intervention or run configuration is missing a dependency.
    #[error("configuration error: {0}")]
    Config(String),

    /// An upstream artifact no longer matches its manifest entry.
    #[error("stale artifact {path}: {reason}; re-run stage `{stage}`")]
    Stale {
        stage: String,
        path: PathBuf,
        reason: String,
    },

    /// Output already exists and `--force` was not given.
    #[error("output {0} already exists (use --force to overwrite)")]
    Exists(PathBuf),

    /// Malformed file contents.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
