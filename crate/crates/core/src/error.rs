use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse grouping of errors, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Io,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("checksum mismatch for {file}: manifest says {expected}, file hashes to {actual}")]
    ChecksumMismatch {
        file: String,
        expected: String,
        actual: String,
    },

    #[error("shape mismatch for {file}: expected {expected} bytes, found {actual}")]
    ShapeMismatch { file: String, expected: u64, actual: u64 },

    #[error("probability row (epoch {epoch:?}, sample {sample}) sums to {sum}, outside 1 +/- 1e-4")]
    Normalization {
        epoch: Option<usize>,
        sample: usize,
        sum: f64,
    },

    #[error("invalid trajectory: {0}")]
    InvalidTensor(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty epoch range [{start}, {end}]")]
    EmptyRange { start: usize, end: usize },

    #[error("teacher probabilities are required but absent")]
    MissingTeacher,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("class {class} has {available} samples, {required} required")]
    InsufficientSamples {
        class: u32,
        available: usize,
        required: usize,
    },

    #[error("window out of range: {0}")]
    WindowOutOfRange(String),

    #[error("no score for sample {0}")]
    MissingScore(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate trajectory: |theta_t - theta_t+M|^2 = {denominator:e} is below 1e-12")]
    DegenerateTrajectory { denominator: f64 },

    #[error("tag mismatch: {0}")]
    TagMismatch(String),

    #[error("layer {layer} has a zero-norm gradient")]
    ZeroNorm { layer: usize },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("at least 3 records are needed for a correlation, got {n}")]
    TooFewRecords { n: usize },

    #[error("subset {subset_id} already stored with size {existing}, refusing size {new}")]
    SizeConflict { subset_id: String, existing: u64, new: u64 },

    #[error("scaling-law fit failed: {0}")]
    FitFailure(String),

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("impossible crop: {0}")]
    ImpossibleCrop(String),

    #[error("sample ids without an image file: {}", .0.join(", "))]
    UnresolvedSamples(Vec<String>),

    #[error("patch scorer failed: {0}")]
    Scorer(String),

    #[error("malformed csv {path}: {message}")]
    Csv { path: PathBuf, message: String },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } | Error::MissingFile(_) | Error::Image { .. } => ErrorClass::Io,
            Error::Domain(_)
            | Error::DegenerateTrajectory { .. }
            | Error::ZeroNorm { .. }
            | Error::UndefinedCorrelation(_)
            | Error::FitFailure(_) => ErrorClass::Numerical,
            _ => ErrorClass::Validation,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Csv {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
