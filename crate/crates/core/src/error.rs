use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("audio file not found: {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("malformed WAV header in {}: {reason}", path.display())]
    MalformedWav { path: PathBuf, reason: String },

    #[error("unsupported WAV encoding in {}: {reason}", path.display())]
    UnsupportedEncoding { path: PathBuf, reason: String },

    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    SampleRateMismatch { expected: u32, actual: u32 },

    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),

    #[error("signal too short: {len} samples, need at least {needed}")]
    SignalTooShort { len: usize, needed: usize },

    #[error("invalid STFT configuration: {0}")]
    InvalidStft(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward called on a node that was never produced by a forward pass")]
    BackwardBeforeForward,

    #[error("loss is not connected to any differentiable input")]
    DisconnectedGraph,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("score {0} is outside [-0.5, 4.5]")]
    ScoreOutOfRange(f64),

    #[error("class index {index} outside 1..={n_classes}")]
    ClassOutOfRange { index: usize, n_classes: usize },

    #[error("soft labels need at least 2 padding classes per side, got {0}")]
    InsufficientPadding(usize),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("need at least {needed} items, got {got}")]
    TooFewItems { needed: usize, got: usize },

    #[error("silent signal: {0}")]
    SilentSignal(&'static str),

    #[error(
        "invalid perturbation fractions: boost {boost} + attenuate {atten} must lie in [0, 1]"
    )]
    InvalidFractions { boost: f64, atten: f64 },

    #[error("{}:{line}: {message}", path.display())]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
