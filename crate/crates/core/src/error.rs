use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not a rotation (orthonormality/determinant off by {deviation:.3e})")]
    NonRotationMatrix { deviation: f64 },

    #[error("non-positive depth at point indices {indices:?}")]
    NonPositiveDepth { indices: Vec<usize> },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("flow kind mismatch: expected {expected:?}, found {found:?}")]
    FlowKindMismatch {
        expected: crate::flow::FlowKind,
        found: crate::flow::FlowKind,
    },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("point cloud contains a non-finite coordinate at index {0}")]
    NonFinitePoint(usize),

    #[error("empty input")]
    EmptyInput,

    #[error("all points were removed")]
    EmptyResult,

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("sample {scene_id:?} has no ground truth but a supervised term is enabled")]
    MissingGroundTruth { scene_id: String },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("validation failed: {0}")]
    Validation(String),

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
}
