use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing or unreadable header: {0}")]
    MissingHeader(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteData(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("prompt contains no tokens")]
    EmptyPrompt,
    #[error("embedding key not found: {0:?}")]
    KeyNotFound(String),
    #[error("bad embedding table: {0}")]
    BadTableFormat(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),
    #[error("checksum mismatch: {0}")]
    BadChecksum(String),
    #[error("checkpoint was written for a different configuration (expected {expected:08x}, found {found:08x})")]
    ConfigMismatch { expected: u32, found: u32 },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("mask has no set voxels")]
    EmptyMask,
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("field has a single voxel; instance statistics are undefined")]
    DegenerateField,
    #[error("cache does not match the current parameters")]
    StaleCache,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("no foreground voxels available for positive sampling")]
    NoForeground,
    #[error("label map {0} has no foreground class")]
    EmptyForeground(usize),
    #[error("corpus misaligned: {0}")]
    CorpusMisaligned(String),
    #[error("missing prediction/ground-truth pair: {0}")]
    MissingPair(String),
    #[error("embedding batch element {index}: {source}")]
    BatchElement {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
