use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation. `details`
    /// names the offending dimension(s).
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// A scalar argument is outside its documented range.
    #[error("{op}: invalid parameter: {details}")]
    InvalidParameter { op: &'static str, details: String },

    /// Misuse of the tape API (e.g. backward from a non-scalar).
    #[error("tape usage error: {0}")]
    TapeUsage(String),

    /// Model configuration violates an invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Config file could not be parsed. Carries the 1-based line number.
    #[error("{path}:{line}: {details}")]
    ConfigParse {
        path: String,
        line: usize,
        details: String,
    },

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("checkpoint {path}: bad magic bytes (not a checkpoint file)")]
    CheckpointBadMagic { path: PathBuf },

    /// Checkpoint format version is not supported.
    #[error("checkpoint {path}: unsupported version {found} (expected {expected})")]
    CheckpointVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    /// Checkpoint file ends mid-record.
    #[error("checkpoint {path}: truncated while reading {section}")]
    CheckpointTruncated { path: PathBuf, section: String },

    /// Dataset layout or contents are unusable.
    #[error("data error: {0}")]
    Data(String),

    /// An image file failed to decode.
    #[error("cannot decode {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn param(op: &'static str, details: impl Into<String>) -> Self {
        Error::InvalidParameter {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
