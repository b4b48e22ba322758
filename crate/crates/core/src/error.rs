use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected {expected} frames, got {got}")]
    WrongFrameCount { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("text to encode is empty")]
    EmptyText,

    #[error("encoder backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("LLM transport failure: {0}")]
    Transport(String),

    #[error("malformed LLM response for {label:?}: {reason}; raw response: {raw:?}")]
    MalformedResponse {
        label: String,
        reason: String,
        raw: String,
    },

    #[error("{kind} attributes for {label:?}: expected {expected} items, got {got}; raw response: {raw:?}")]
    CountMismatch {
        label: String,
        kind: &'static str,
        expected: usize,
        got: usize,
        raw: String,
    },

    #[error("knowledge base fingerprint mismatch: file has {found}, run expects {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("no knowledge entry for class {0:?}")]
    KnowledgeMiss(String),

    #[error("schema violation in {path}: {reason}")]
    Schema { path: PathBuf, reason: String },

    #[error("cosine distance undefined for a zero-norm vector")]
    ZeroVector,

    #[error("smoothing temperature must be positive, got {0}")]
    InvalidLambda(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("video has no frames")]
    EmptyVideo,

    #[error("crop {crop_h}x{crop_w} larger than frame {h}x{w}")]
    CropTooLarge {
        crop_h: usize,
        crop_w: usize,
        h: usize,
        w: usize,
    },

    #[error("class {class:?} appears in splits {first} and {second}")]
    SplitOverlap {
        class: String,
        first: String,
        second: String,
    },

    #[error("clip {0:?} not found")]
    MissingClip(String),

    #[error("degenerate synthetic spec: {0}")]
    DegenerateSpec(String),

    #[error("training diverged at episode {episode}: loss = {loss}")]
    Divergence { episode: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
