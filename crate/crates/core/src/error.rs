use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PspError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PspError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid axis {axis} for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("reshape: cannot view {from:?} ({from_len} elements) as {to:?} ({to_len} elements)")]
    ElementCount {
        from: Vec<usize>,
        from_len: usize,
        to: Vec<usize>,
        to_len: usize,
    },

    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward: tape already consumed; reset gradients before calling backward again")]
    TapeExhausted,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{file}: schema violation at `{field}`: {msg}")]
    Schema {
        file: String,
        field: String,
        msg: String,
    },

    #[error("invalid pyramid: {0}")]
    Pyramid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: bad tensor container: {msg}")]
    Container { path: PathBuf, msg: String },
}

impl PspError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        PspError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PspError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        PspError::Json {
            path: path.into(),
            source,
        }
    }
}
