//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by dataset handling, models, attacks and the
/// evaluation harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Missing or unreadable inputs (manifest, frames, checkpoints).
    #[error("load error: {0}")]
    Load(String),

    /// Structurally invalid inputs (bad shapes, malformed files).
    #[error("format error: {0}")]
    Format(String),

    /// A clip references a class name absent from its ontology.
    #[error("label error: {0}")]
    Label(String),

    /// Invalid caller-supplied parameters or configuration.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Training could not start or diverged.
    #[error("training error{}: {msg}", epoch.map(|e| format!(" (epoch {e})")).unwrap_or_default())]
    Training { epoch: Option<usize>, msg: String },

    /// A caller violated a model interface contract (unknown layer id etc.).
    #[error("interface error: {0}")]
    Interface(String),

    /// The oracle's query budget is exhausted; attack loops treat this as
    /// terminal failure.
    #[error("query budget exceeded: {used} queries used, limit {limit}")]
    BudgetExceeded { used: u64, limit: u64 },

    /// Zero feature vectors, zero anchors and similar dead ends.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Deception rate is undefined when clean accuracy is zero.
    #[error("deception rate undefined: clean accuracy is zero")]
    DrUndefined,

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
