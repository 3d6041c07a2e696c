//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point has non-positive camera-frame depth ({0})")]
    NonPositiveDepth(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel count {channels} not divisible by group count {groups}")]
    BadGroupCount { channels: usize, groups: usize },
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("weight file version {found} does not match expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("no view sees the query point")]
    NoValidView,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("bad image size: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    BadImageSize {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("bad size: {0}")]
    BadSize(String),
    #[error("no valid pixels under the evaluation mask")]
    NoValidPixels,
    #[error("hypothesis direction is not a unit vector (norm {0})")]
    BadDirection(f64),
    #[error("non-finite loss in batch {batch}: {detail}")]
    NonFiniteLoss { batch: usize, detail: String },
    #[error("numeric failure in stage `{stage}`: {detail}")]
    NumericFailure { stage: String, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code mapping used by the CLI: 2 for validation-style
    /// failures, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } | Error::NumericFailure { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
