//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value lies outside the domain an operation accepts.
    #[error("input domain: {0}")]
    InputDomain(String),

    /// Malformed record in a line-oriented text file.
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate fixation in scanpath for video `{0}`")]
    DuplicateFixation(String),

    /// Inconsistent or impossible configuration.
    #[error("configuration: {0}")]
    Config(String),

    /// Tensor shapes disagree with the configured contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("an injection plan is already attached")]
    AlreadyAttached,

    #[error("no injection plan is attached")]
    NotAttached,

    #[error("sequence layout has no visual block")]
    NoVisualSpan,

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("gradient check failed for `{tensor}` at {coord:?}: relative error {rel_err:.3e} > {tolerance:.1e}")]
    GradCheck {
        tensor: String,
        coord: (usize, usize),
        rel_err: f64,
        tolerance: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
