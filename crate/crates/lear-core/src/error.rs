//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible. Carries both shapes so the message
    /// is actionable without a debugger.
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A softmax slice had every entry masked out.
    #[error("degenerate softmax slice {slice}: all entries masked")]
    DegenerateSlice { slice: usize },

    /// An operation was called outside its contract (non-scalar loss,
    /// inverted span indices, missing gold matrix, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A cached label encoding was read after the parameters changed.
    #[error("stale label cache: parameters at version {current}, cache built at {cached}")]
    StaleCache { cached: u64, current: u64 },

    #[error("config error: {0}")]
    Config(String),

    /// Corpus or label-file validation failure. `line` is 1-based when known.
    #[error("data error{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Data { line: Option<usize>, msg: String },

    #[error("category '{category}' has {have} sentences, need {need}")]
    InsufficientData {
        category: String,
        have: usize,
        need: usize,
    },

    /// Training produced a non-finite loss or gradient.
    #[error("divergence: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data {
            line: None,
            msg: msg.into(),
        }
    }

    pub fn data_at(line: usize, msg: impl Into<String>) -> Self {
        Error::Data {
            line: Some(line),
            msg: msg.into(),
        }
    }

    /// Process exit code the CLI maps this error to: 1 for validation
    /// problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) | Error::Io(_) | Error::StaleCache { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
