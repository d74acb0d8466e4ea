use thiserror::Error;

/// Errors raised across the synthesis stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor op failed: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("malformed sequence: {0}")]
    MalformedSequence(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("corpus spec is degenerate: {0}")]
    DegenerateCorpus(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("config mismatch on `{field}`: checkpoint has {found}, expected {expected}")]
    ConfigMismatch {
        field: &'static str,
        found: String,
        expected: String,
    },

    #[error("non-finite loss at step {step} (batch {batch_id}): diff={diff} stop={stop} align={align}")]
    NonFiniteLoss {
        step: u64,
        batch_id: u64,
        diff: f64,
        stop: f64,
        align: f64,
    },

    #[error("generation exceeded the runaway guard of {max_chunks} chunks")]
    Runaway { max_chunks: usize },

    #[error("token source: {0}")]
    Source(String),

    #[error("chunk sink closed")]
    SinkClosed,

    #[error("plot: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, Error>;
