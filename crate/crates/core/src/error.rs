use thiserror::Error;

pub type Result<T, E = StaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum StaError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },

    #[error("{what}: expected length {expected}, got {actual}")]
    LengthMismatch { what: &'static str, expected: usize, actual: usize },

    #[error("non-finite value at index {index} in {what}")]
    NonFinite { what: &'static str, index: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unknown operation `{0}`")]
    UnknownOp(String),

    #[error("missing {0}")]
    Missing(String),

    #[error("distributions have disjoint support: fused product is identically zero")]
    DisjointSupport,

    #[error("ground truth is empty, mAP is undefined")]
    EmptyGroundTruth,

    #[error("{file}:{line}: field `{field}`: {message}")]
    Parse { file: String, line: usize, field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl StaError {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            StaError::ShapeMismatch { .. } | StaError::LengthMismatch { .. } => "shape",
            StaError::NonFinite { .. } | StaError::InvalidValue(_) => "invalid_value",
            StaError::InvalidParameter { .. } => "invalid_parameter",
            StaError::MissingTensor(_) | StaError::Missing(_) => "missing",
            StaError::UnknownOp(_) => "unknown_op",
            StaError::DisjointSupport => "disjoint_support",
            StaError::EmptyGroundTruth => "empty_ground_truth",
            StaError::Parse { .. } => "parse",
            StaError::Io(_) => "io",
            StaError::Json(_) => "json",
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        StaError::InvalidParameter { name, reason: reason.into() }
    }
}
