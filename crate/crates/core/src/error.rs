use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, got {got:?} but expected {expected}")]
    ShapeMismatch {
        op: &'static str,
        got: Vec<usize>,
        expected: String,
    },
    #[error("{op}: non-finite input value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward: loss must hold a single value, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward: loss is not recorded on the tape")]
    NotOnTape,
    #[error("{op}: row {row} has zero norm")]
    ZeroNormRow { op: &'static str, row: usize },
    #[error("edge loss: reference edge ({0}, {1}) has zero length")]
    ZeroLengthEdge(usize, usize),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {what}")]
    NonFiniteValue { what: String },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("index {index} out of range for {len} vertices")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("mesh has no vertices")]
    NoVertices,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint: unsupported version {0}")]
    BadVersion(u32),
    #[error("checkpoint: truncated file")]
    Truncated,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("model dimensions do not match: {0}")]
    DimMismatch(String),

    #[error("dataset: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch} iteration {iter}: {what}")]
    Diverged { epoch: usize, iter: usize, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, got: &[usize], expected: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            got: got.to_vec(),
            expected: expected.into(),
        }
    }
}
