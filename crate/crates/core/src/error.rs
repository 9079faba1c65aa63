use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("targets {first} and {second} collide in sub-pixel cell ({row}, {col})")]
    Collision {
        first: usize,
        second: usize,
        row: usize,
        col: usize,
    },

    #[error("target {index} maps to cell ({row}, {col}) outside the {rows}x{cols} grid")]
    OutOfBounds {
        index: usize,
        row: i64,
        col: i64,
        rows: usize,
        cols: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("scene constraints infeasible: rejection budget of {tries} draws exhausted")]
    Infeasible { tries: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated header")]
    TruncatedHeader { path: PathBuf },

    #[error("{path}: record {index} is truncated")]
    TruncatedRecord { path: PathBuf, index: usize },

    #[error("solver diverged at iteration {iteration} (norm {norm:e})")]
    Divergence { iteration: usize, norm: f64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape; call reset first")]
    BackwardTwice,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training loss became non-finite at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
