//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two containers that must be structurally identical (same layer names,
    /// shapes, order) differ.
    #[error("structural mismatch: {0}")]
    StructuralMismatch(String),

    /// The model exposes no prunable coordinates, so pruning ratios are
    /// undefined.
    #[error("degenerate model: no prunable coordinates")]
    DegenerateModel,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Every sample of an epoch was marked as a clustering outlier; the
    /// caller skips the training epoch.
    #[error("empty epoch: all samples are outliers")]
    EmptyEpoch,

    #[error("invalid pruning target {target}: below current ratio {current}")]
    InvalidTarget { target: f64, current: f64 },

    /// Stage-2 of the pruning gate was invoked without a recorded stage-1
    /// pre-prune accuracy.
    #[error("protocol order violation: stage-2 called before stage-1 proceed")]
    ProtocolOrder,

    /// Retrieval metrics requested but no query has a valid cross-camera
    /// match.
    #[error("undefined metric: no valid queries")]
    UndefinedMetric,

    #[error("aggregation weights must sum to 1, got {0}")]
    WeightSum(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("decode error [{}]: {0}", .0.code())]
    Decode(#[from] DecodeError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Wire-format decode failures. Each variant is a distinct error code so
/// tools can surface the exact defect.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum DecodeError {
    #[error("message does not start with the FKLP magic")]
    BadMagic,
    #[error("unsupported message version {0}")]
    UnsupportedVersion(u16),
    #[error("message truncated")]
    Truncated,
    #[error("declared non-zero count does not match mask popcount")]
    PopcountMismatch,
    #[error("layer name is not valid utf-8")]
    BadName,
    #[error("mask padding bits are not zero")]
    BadPadding,
    #[error("trailing bytes after final layer")]
    TrailingBytes,
}

impl DecodeError {
    /// Short stable identifier, used by the CLI when surfacing failures.
    pub fn code(&self) -> &'static str {
        match self {
            DecodeError::BadMagic => "bad-magic",
            DecodeError::UnsupportedVersion(_) => "version-mismatch",
            DecodeError::Truncated => "truncated",
            DecodeError::PopcountMismatch => "popcount-mismatch",
            DecodeError::BadName => "bad-name",
            DecodeError::BadPadding => "bad-padding",
            DecodeError::TrailingBytes => "trailing-bytes",
        }
    }
}
