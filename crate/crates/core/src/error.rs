use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad argument to an operation: dimension mismatch, empty batch, label out of range.
    #[error("invalid input: {0}")]
    Input(String),

    /// An operation was called in the wrong state (e.g. backward before forward).
    #[error("invalid state: {0}")]
    State(String),

    /// A stage was used in a role it does not support.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("non-finite gradient at parameter index {index}")]
    NonFiniteGradient { index: usize },

    #[error("simulation produced a non-finite state at step {step}")]
    Simulation { step: usize },

    #[error("pair {index}: {source}")]
    Pair {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("reflow stage {stage}: {source}")]
    Stage {
        stage: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("lineage mismatch: {0}")]
    Lineage(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the CLI. Each failure class gets its own code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::State(_) => 2,
            Error::Config(_) => 3,
            Error::MissingInput(_) => 4,
            Error::Lineage(_) => 5,
            Error::Usage(_) => 6,
            Error::Training { .. } | Error::NonFiniteGradient { .. } => 7,
            Error::Simulation { .. } => 8,
            Error::Pair { source, .. } | Error::Stage { source, .. } => source.exit_code(),
            Error::Format { .. } | Error::Json(_) => 9,
            Error::Io(_) => 10,
        }
    }
}
