//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor has no elements")]
    EmptyTensor,

    #[error("invalid range: lo ({lo}) must be below hi ({hi})")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensorData { shape: Vec<usize>, len: usize },

    #[error("non-finite value in tensor")]
    NonFinite,

    #[error("zero-norm vector in cosine distance")]
    ZeroNorm,

    #[error("histogram bin counts differ: {0} vs {1}")]
    BinMismatch(usize, usize),

    #[error("histogram has no counts")]
    AllZero,

    #[error("bad magic header: {0:?}")]
    BadMagic([u8; 8]),

    #[error("shape contract violation: {0}")]
    ShapeContractViolation(String),

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("archive holds a {found}, expected a {expected}")]
    WrongArchiveKind {
        expected: &'static str,
        found: String,
    },

    #[error("I/O failure on {path:?}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unknown capture site {0}")]
    UnknownSite(String),

    #[error("batchnorm at layer {0} has no foldable linear/conv2d predecessor")]
    UnfoldablePattern(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("integer {value} outside quantization range [{lo}, {hi}]")]
    OutOfRange { value: i32, lo: i32, hi: i32 },

    #[error("quantization config has no entry for site {0}")]
    IncompleteConfig(String),

    #[error("degenerate calibration range (max {max}, min {min})")]
    DegenerateRange { min: f64, max: f64 },

    #[error("site {site}: {source}")]
    Site {
        site: String,
        #[source]
        source: Box<Error>,
    },

    #[error("cannot draw {requested} samples from a pool of {available}")]
    OverDraw { requested: usize, available: usize },

    #[error("class {0} has no samples in the pool")]
    MissingClass(usize),

    #[error("trial with seed {seed} failed after {completed} completed trials: {source}")]
    Trial {
        seed: u64,
        completed: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no samples")]
    EmptySamples,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
