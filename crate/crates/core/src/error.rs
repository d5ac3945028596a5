use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("attention mask row {row} allows no keys")]
    DegenerateRow { row: usize },

    #[error("cross entropy over zero non-ignored positions")]
    EmptyLoss,

    #[error("no graph: {0}")]
    NoGraph(String),

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("parameter integrity: {0}")]
    Integrity(String),

    #[error("loss function is not deterministic (|f1 - f2| = {delta:e}); disable dropout")]
    NonDeterministic { delta: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty context: every utterance has length zero")]
    EmptyContext,

    #[error("utterance {utterance} has length zero, so it has no CLS position")]
    NoCls { utterance: usize },

    #[error("encoder conversion: {0}")]
    Conversion(String),

    #[error("context length {len} exceeds configured maximum {max}")]
    ContextTooLong { len: usize, max: usize },

    #[error("mean of an empty token sequence")]
    EmptyMean,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid dialog {id}: {msg}")]
    InvalidDialog { id: String, msg: String },

    #[error("missing annotation: {0}")]
    Annotation(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 for validation problems, 2 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. }
            | Error::DegenerateRow { .. }
            | Error::EmptyLoss
            | Error::NoGraph(_)
            | Error::BackwardTwice
            | Error::Integrity(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
