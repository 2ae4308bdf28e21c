use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {what} at row {row}, column {col}")]
    NonFiniteValue {
        what: &'static str,
        row: usize,
        col: usize,
    },

    #[error("label {label} at position {index} is out of range for {n_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        n_classes: usize,
    },

    #[error("row {row} of {what} has norm {norm}, too far from unit length to renormalize")]
    NormTooFarFromUnit {
        what: &'static str,
        row: usize,
        norm: f64,
    },

    #[error("{what} is empty")]
    Empty { what: &'static str },

    #[error("class {class} has no support sample")]
    EmptyClass { class: usize },

    #[error("class {class} has {available} shots, {required} required")]
    InsufficientShots {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{path}: bad magic bytes, expected \"EMB1\"")]
    BadMagic { path: PathBuf },

    #[error("{path}: truncated file, header declares {expected} payload bytes, found {found}")]
    TruncatedFile {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{path}: {found} trailing bytes after the declared payload")]
    TrailingData { path: PathBuf, found: u64 },

    #[error("{path}: header declares {bytes} payload bytes, above the {cap} byte cap")]
    HeaderTooLarge { path: PathBuf, bytes: u64, cap: u64 },

    #[error("{path}: line {line} has {found} columns, expected {expected}")]
    RaggedCsv {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}: line {line}: {message}")]
    ParseError {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: line {line}: negative label {value}")]
    NegativeLabel {
        path: PathBuf,
        line: usize,
        value: i64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
