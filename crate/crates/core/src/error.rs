use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid count: requested {requested}, only {available} available")]
    InvalidCount { requested: usize, available: usize },

    #[error("tokenization produced no tokens")]
    EmptyTokenization,

    #[error("{path}: magic bytes mismatch")]
    MagicMismatch { path: PathBuf },

    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("{path}: truncated blob (expected {expected} bytes, found {found})")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("dimension inconsistency: {0}")]
    DimensionMismatch(String),

    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },

    #[error("inconsistent data: {0}")]
    Inconsistency(String),

    #[error("mask plan leaves no visible tokens ({masked} of {total} masked)")]
    DegeneratePlan { masked: usize, total: usize },

    #[error("training diverged at step {step}")]
    DivergedRun { step: u64 },

    #[error("bad probe split: {0}")]
    BadSplit(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
