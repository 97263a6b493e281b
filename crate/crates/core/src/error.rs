use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants carry enough context (module, offending value) to be shown to a
/// user directly.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid audio: {0}")]
    InvalidAudio(String),

    #[error("excerpt out of bounds: offset {offset_s}s + length {len_s}s exceeds {duration_s}s")]
    OutOfBounds {
        offset_s: f64,
        len_s: f64,
        duration_s: f64,
    },

    #[error("audio too short: {samples} samples, need at least {required}")]
    TooShort { samples: usize, required: usize },

    #[error("mel input has {frames} frames × {bands} bands; the pooling stack needs at least {required} of each")]
    TooFewFrames {
        frames: usize,
        bands: usize,
        required: usize,
    },

    #[error("length mismatch: {left} vs {right} samples")]
    LengthMismatch { left: usize, right: usize },

    #[error("unsupported wav file {path}: {reason}")]
    UnsupportedWav { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("no vocal-active material after {retries} retries ({context})")]
    NoActiveVocals { retries: usize, context: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("duplicate: {0}")]
    Duplicate(String),

    #[error("response log {path}, line {line}: {message}")]
    ResponseLog {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("training step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
