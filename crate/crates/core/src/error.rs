use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown preset `{0}` (expected one of: tiny, base, base_plus, large)")]
    UnknownPreset(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed container {path}: {reason}")]
    MalformedContainer { path: PathBuf, reason: String },
    #[error("sample `{id}` has {frames} frames, exceeding the batch budget of {budget}")]
    SampleExceedsBudget {
        id: String,
        frames: usize,
        budget: usize,
    },
    #[error("expected {expected} input, got {got}")]
    WrongInputSize { expected: String, got: String },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("audio length {0} is not a multiple of 640 samples")]
    BadLength(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("step {step} outside schedule range [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },
    #[error("no masked positions to compute a prediction loss on")]
    NoMaskedPositions,
    #[error("label sequence of length {labels} cannot be aligned to {frames} frames")]
    InfeasibleLength { labels: usize, frames: usize },
    #[error("character {0:?} is not in the tokenizer inventory")]
    OutOfVocabulary(char),
    #[error("sample `{0}` has no transcript")]
    MissingTranscript(String),
    #[error("reference transcript is empty")]
    EmptyReference,
    #[error("checkpoint does not match model configuration: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
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
