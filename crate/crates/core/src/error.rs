use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("point outside the field's domain: {0}")]
    OutOfDomain(String),

    #[error("non-finite input")]
    NonFinite,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error(transparent)]
    Model(#[from] ModelFormatError),

    #[error(transparent)]
    Manifest(#[from] ManifestError),

    #[error("not enough calibration configs: {found} distinct, need at least {needed}")]
    InsufficientCalibration { found: usize, needed: usize },

    #[error("no unoccluded (view, point) pairs were sampled")]
    NoVisiblePairs,

    #[error("latency of {latency_ms} ms exceeds trajectory length of {duration_ms} ms")]
    LatencyExceedsTrajectory { latency_ms: usize, duration_ms: usize },

    #[error("field has not been trained")]
    Untrained,

    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),

    #[error("need at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },

    #[error("image encoding: {0}")]
    Image(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("io error at {path}: {source}")]
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

    /// Short machine-readable tag for the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Degenerate(_) => "degenerate_input",
            Error::InvalidGrid(_) => "invalid_grid",
            Error::OutOfDomain(_) => "out_of_domain",
            Error::NonFinite => "non_finite",
            Error::Config(_) => "config",
            Error::EmptyBatch => "empty_batch",
            Error::Model(e) => e.kind(),
            Error::Manifest(e) => e.kind(),
            Error::InsufficientCalibration { .. } => "insufficient_calibration",
            Error::NoVisiblePairs => "no_visible_pairs",
            Error::LatencyExceedsTrajectory { .. } => "latency_exceeds_trajectory",
            Error::Untrained => "untrained",
            Error::DimensionMismatch(..) => "dimension_mismatch",
            Error::TooFewFrames { .. } => "too_few_frames",
            Error::Image(_) => "image",
            Error::Protocol(_) => "protocol",
            Error::Io { .. } => "io",
        }
    }
}

/// Failures decoding a serialized field.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelFormatError {
    #[error("bad magic {0:?}, expected \"FNRF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported model version {0}")]
    Version(u32),
    #[error("model stream truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0} trailing bytes after model payload")]
    TrailingBytes(usize),
}

impl ModelFormatError {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelFormatError::BadMagic(_) => "model_bad_magic",
            ModelFormatError::Version(_) => "model_version",
            ModelFormatError::Truncated { .. } => "model_truncated",
            ModelFormatError::Shape(_) => "model_shape",
            ModelFormatError::TrailingBytes(_) => "model_trailing_bytes",
        }
    }
}

/// Failures reading a dataset directory.
#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("referenced file is missing: {0}")]
    MissingFile(PathBuf),
    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),
    #[error("manifest schema version {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("malformed manifest: {0}")]
    Malformed(String),
}

impl ManifestError {
    pub fn kind(&self) -> &'static str {
        match self {
            ManifestError::MissingFile(_) => "manifest_missing_file",
            ManifestError::Checksum(_) => "manifest_checksum",
            ManifestError::SchemaVersion { .. } => "manifest_schema_version",
            ManifestError::Malformed(_) => "manifest_malformed",
        }
    }
}
