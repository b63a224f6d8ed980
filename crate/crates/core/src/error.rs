use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} is out of range for a tensor of rank {ndim}")]
    InvalidAxis { axis: usize, ndim: usize },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("rotation matrix is not orthonormal with det +1: {0:?}")]
    NotARotation([[f64; 3]; 3]),

    #[error("volume must be cubic [N,C,D,D,D], got {0:?}")]
    NonCubicVolume(Vec<usize>),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("{path}: malformed dataset: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("unknown object id `{0}`")]
    UnknownObject(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, file has {len}")]
    TruncatedCheckpoint { offset: usize, needed: usize, len: usize },

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
