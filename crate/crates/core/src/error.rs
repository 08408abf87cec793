use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("run lengths sum to {actual}, expected {expected} ({width}x{height})")]
    LengthMismatch {
        actual: usize,
        expected: usize,
        width: usize,
        height: usize,
    },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("token grid references entity {id} but only {captions} captions were supplied")]
    UnknownEntityId { id: u32, captions: usize },

    #[error("invalid layer range [{start}, {end}) for {total} layers")]
    RangeError {
        total: usize,
        start: usize,
        end: usize,
    },

    #[error("gamma must lie in (0, 1], got {0}")]
    GammaOutOfRange(f64),

    #[error("{0}")]
    DimensionError(String),

    #[error("query rows {rows:?} have no allowed key")]
    UnreachableQuery { rows: Vec<usize> },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask pair set is empty")]
    EmptySet,

    #[error("invalid instruction: {0}")]
    InvalidInstruction(String),

    #[error("manifest {}: {reason}", path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<memory>".into()))]
    ManifestParse {
        path: Option<PathBuf>,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
