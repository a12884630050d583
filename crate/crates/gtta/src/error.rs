//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by tensor and autodiff operations.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor does not participate in any gradient path")]
    DetachedTensor,
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
}

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum GttaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    // synthetic data
    #[error("domain would contain no samples")]
    EmptyDomain,
    #[error("bad magic bytes in domain file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    VersionMismatch(u32),

    // memory bank / TPD
    #[error("classifier column {0} has near-zero norm")]
    ZeroWeightColumn(usize),
    #[error("embedding has near-zero norm")]
    ZeroNormEmbedding,
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("class {0} has no bank entries")]
    EmptyClass(usize),
    #[error("neighbor set is empty")]
    EmptyNeighborSet,
    #[error("invalid lambda {0}: must lie in [0, 1]")]
    InvalidLambda(f64),
    #[error("k_keep {k} out of range [1, {n}]")]
    BadK { k: usize, n: usize },

    // harness
    #[error("source dataset contains a single class")]
    SingleClassSource,
    #[error("evaluation set is empty")]
    EmptyEval,
    #[error("evaluation set contains a single class; AUC undefined")]
    SingleClassEval,

    // cli / config
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GttaError>;
