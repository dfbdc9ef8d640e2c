use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("{path}: expected mono audio, found {channels} channels")]
    ChannelCount { path: PathBuf, channels: u16 },

    #[error("{path}: unsupported encoding ({detail})")]
    UnsupportedEncoding { path: PathBuf, detail: String },

    #[error("expected sample rate {expected} Hz, got {actual} Hz")]
    SampleRate { expected: u32, actual: u32 },

    #[error("waveform contains non-finite samples")]
    NonFinite,

    #[error("{path}:{line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid manifest entry: {0}")]
    InvalidEntry(String),

    #[error("empty input")]
    EmptyInput,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("reference has zero energy after mean normalization")]
    ZeroEnergyReference,

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("silent source at index {0}")]
    SilentSource(usize),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("input of {len} samples is shorter than one encoder window ({window})")]
    TooShort { len: usize, window: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config {path}: key `{key}`: {reason}")]
    ConfigKey {
        path: PathBuf,
        key: String,
        reason: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("training data error: {0}")]
    TrainingData(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("serialization error: {0}")]
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
