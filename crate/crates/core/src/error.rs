use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Io,
    Numeric,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Validation => "validation",
            ErrorCategory::Io => "io",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("{what} {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable is not recorded on this tape")]
    NotOnTape,

    #[error(
        "axis {axis} has extent {extent}, which is not divisible by {devices} devices; \
         choose head/hidden counts divisible by the device count"
    )]
    Divisibility {
        axis: usize,
        extent: usize,
        devices: usize,
    },

    #[error("collective aborted: {0}")]
    CollectiveAborted(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed dataset JSON: {0}")]
    MalformedDataset(String),

    #[error("example {index}: missing or empty field \"{field}\"")]
    MissingField { index: usize, field: &'static str },

    #[error("example {index}: rendered prompt uses {prompt_len} tokens, max_len is {max_len}")]
    PromptTooLong {
        index: usize,
        prompt_len: usize,
        max_len: usize,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("bad magic")]
    BadMagic,

    #[error("container version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("container bounds violation: {0}")]
    OutOfBounds(String),

    #[error("truncated container: need {needed} bytes, file has {actual}")]
    Truncated { needed: u64, actual: u64 },

    #[error("malformed container header: {0}")]
    MalformedHeader(String),

    #[error("missing tensor \"{0}\"")]
    MissingTensor(String),

    #[error("config mismatch on field {field}: base has {base}, adapter has {adapter}")]
    ConfigMismatch {
        field: &'static str,
        base: String,
        adapter: String,
    },

    #[error("{path}: {source}")]
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

    pub fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. } => ErrorCategory::Io,
            Error::NonFiniteLoss { .. } => ErrorCategory::Numeric,
            _ => ErrorCategory::Validation,
        }
    }
}
