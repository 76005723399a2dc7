use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layer {layer}: shape mismatch, expected {expected:?} but got {found:?}")]
    ShapeMismatch {
        layer: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor shape {shape:?} does not hold {len} values")]
    TensorSize { shape: Vec<usize>, len: usize },

    #[error("layer {layer}: {reason}")]
    InvalidLayer { layer: usize, reason: String },

    #[error("layer {layer}: unsupported placement: {reason}")]
    UnsupportedPlacement { layer: usize, reason: String },

    #[error("graph is in {found} mode, expected {expected}")]
    WrongMode { expected: String, found: String },

    #[error("slot {slot}: channel count mismatch, expected {expected} but got {found}")]
    ChannelMismatch {
        slot: usize,
        expected: usize,
        found: usize,
    },

    #[error("slot {slot} channel {channel}: threshold {value} is below the floor {floor}")]
    ThresholdTooSmall {
        slot: usize,
        channel: usize,
        value: f32,
        floor: f32,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("data source yielded no batches")]
    EmptyData,

    #[error("spike trace does not match graph: {0}")]
    TraceMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),

    #[error("dangling weight reference {0:?}")]
    DanglingReference(String),

    #[error("duplicate blob entry {0:?}")]
    DuplicateEntry(String),

    #[error("entry {name:?}: {reason}")]
    EntryShape { name: String, reason: String },

    #[error("truncated file while reading {0}")]
    Truncated(String),

    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
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

    pub(crate) fn layer(layer: usize, reason: impl Into<String>) -> Self {
        Error::InvalidLayer {
            layer,
            reason: reason.into(),
        }
    }

    /// True for errors caused by malformed inputs (files, shapes, data)
    /// rather than by a broken internal invariant.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::TraceMismatch(_) => false,
            Error::Stage { source, .. } => source.is_data_error(),
            _ => true,
        }
    }

    /// Tags the error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
