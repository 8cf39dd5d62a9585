use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures surfaced by every layer of the crate.
///
/// The CLI maps [`Error::is_config`] to exit code 2 and [`Error::is_data_format`]
/// to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("label {label} at timestep {t} is outside [0, {classes})")]
    LabelOutOfRange { t: usize, label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of length {len} is too short (need at least {min})")]
    TooShort { len: usize, min: usize },

    #[error("cannot build a table of {requested} distinct permutations of 9 segments (max {max})")]
    ImpossiblePermutationCount { requested: usize, max: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: needed {needed} more bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is incompatible with the requested model: {0}")]
    Incompatible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Problems with user-supplied configuration (CLI exit code 2).
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::ImpossiblePermutationCount { .. } | Error::Incompatible(_)
        )
    }

    /// Problems with the bytes of a data or checkpoint file (CLI exit code 3).
    pub fn is_data_format(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::VersionMismatch { .. }
                | Error::Truncated { .. }
                | Error::Malformed(_)
                | Error::UnknownParameter(_)
                | Error::ParameterShape { .. }
        )
    }
}
