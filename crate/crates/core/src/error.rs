use std::path::PathBuf;

/// Errors raised anywhere in the model, data and checkpoint pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("empty loss support: every weight-mask entry is zero")]
    EmptyLossSupport,

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("example {index} has length {len}, longer than max_len {max_len}")]
    ExampleTooLong { index: usize, len: usize, max_len: usize },

    #[error("row {row} holds {count} segments but at most {max} are allowed")]
    TooManySegments { row: usize, count: usize, max: usize },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("unexpected parameter `{0}`")]
    UnexpectedParameter(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("truncated blob: expected {expected} bytes, found {found}")]
    TruncatedBlob { expected: u64, found: u64 },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("surgery requires a source with at least one decoder layer")]
    NoDecoderLayers,

    #[error("non-finite gradient for `{name}` at step {step}")]
    NonFiniteGradient { name: String, step: u64 },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("label `{label}` is not in the label set of task `{task}`")]
    UnknownLabel { label: String, task: String },

    #[error("{path}:{line}: {reason}")]
    MalformedRow { path: String, line: usize, reason: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("metric `{metric}` missing for task `{task}`")]
    MissingMetric { task: String, metric: String },

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("variant mismatch: {0}")]
    Variant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
