use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error(
        "cannot place {labels} label embeddings with pairwise angle >= {min_angle_deg} degrees \
         in {dim} dimensions (gave up after {attempts} attempts)"
    )]
    LabelSeparation {
        labels: usize,
        dim: usize,
        min_angle_deg: f64,
        attempts: usize,
    },

    #[error("zero-norm vector in {0}: cosine similarity is undefined")]
    ZeroNorm(&'static str),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {what} (gaussian {index})")]
    NonFinite { what: &'static str, index: usize },

    #[error("non-finite gradient for parameter group {0}")]
    NonFiniteGradient(String),

    #[error("codebook size {n} exceeds the number of available pixels ({pixels})")]
    CodebookTooLarge { n: usize, pixels: usize },

    #[error("no feature maps supplied")]
    NoFeatures,

    #[error("loss term {term} became {value} at iteration {iteration}")]
    NonFiniteLoss {
        iteration: usize,
        term: &'static str,
        value: f64,
    },

    #[error("query {0:?} has no ground-truth label mapping")]
    MissingMapping(String),

    #[error("codebook size mismatch: {context} expects N = {expected}, but the codebook has N = {found}")]
    CodebookMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {format} file: {reason}")]
    Format {
        format: &'static str,
        reason: String,
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

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("section {section} is truncated: need {needed} bytes, {available} available")]
    Truncated {
        section: String,
        needed: u64,
        available: u64,
    },

    #[error("section {section} is malformed: {reason}")]
    Malformed { section: String, reason: String },

    #[error("required section {0} is missing")]
    MissingSection(&'static str),

    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}
