use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. The CLI maps these onto exit codes:
/// config errors -> 1, numeric failures -> 2, I/O failures -> 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("backpropagation requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("invalid array: shape {shape:?} holds {len} values")]
    BadArray { shape: Vec<usize>, len: usize },

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("environment stepped after episode end without reset")]
    StepAfterDone,

    #[error("unknown environment {0:?} (expected pointmass2d, pendulum, or mountaincar_c)")]
    UnknownEnv(String),

    #[error("invalid config:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metrics file {path}, line {line}: {message}")]
    Metrics {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    /// Exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownEnv(_) => 1,
            Error::Io(_) | Error::Checkpoint(_) | Error::Metrics { .. } => 3,
            _ => 2,
        }
    }
}
