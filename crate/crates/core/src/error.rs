use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("affine matrix is singular")]
    AffineSingular,
    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("unrecognized file format: {0}")]
    UnrecognizedFormat(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensions: {0}")]
    UnsupportedDimensions(String),
    #[error("truncated file: expected {expected} bytes of voxel data, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("malformed quaternion: 1 - b^2 - c^2 - d^2 = {0}")]
    MalformedQuaternion(f64),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("subject `{subject}` has no file for source `{source_name}`")]
    MissingModality { subject: String, source_name: String },
    #[error("source `{source_name}`: {first:?} and {second:?} both map to subject `{subject}`")]
    AmbiguousMatch {
        source_name: String,
        subject: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("file {0:?} yields an empty subject id")]
    EmptySubjectId(PathBuf),
    #[error("manifest row {row}, column `{column}`: path missing or not found")]
    ManifestPathMissing { row: usize, column: String },
    #[error("duplicate subject `{0}`")]
    DuplicateSubject(String),
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("mask is empty")]
    EmptyMask,
    #[error("subject `{0}` has a degenerate intensity histogram")]
    DegenerateHistogram(String),
    #[error("malformed histogram model: {0}")]
    ModelFormat(String),
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),

    #[error("invalid weight map: {0}")]
    InvalidWeightMap(String),
    #[error("window start {0:?} is not a grid position")]
    UnexpectedWindow([usize; 3]),
    #[error("aggregation incomplete: {0} voxels never written")]
    IncompleteCoverage(usize),
    #[error("sampler failed: {0}")]
    Sampler(String),

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("unknown configuration key `{key}` in section [{section}]")]
    UnknownConfigKey { section: String, key: String },
    #[error("[{section}] {key} = `{value}`: expected {expected}")]
    ConfigTypeError {
        section: String,
        key: String,
        value: String,
        expected: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
}

/// Broad failure classes, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Runtime,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Runtime => 4,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            UnknownConfigKey { .. } | ConfigTypeError { .. } | Config(_) => ErrorClass::Config,
            Io(_) | Sampler(_) => ErrorClass::Runtime,
            _ => ErrorClass::Data,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Csv(format!("{other:?}")),
        }
    }
}
