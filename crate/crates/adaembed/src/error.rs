//! Crate-wide error type.

/// Errors raised across the engine, data pipeline, trainer, and CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input is numerically degenerate (e.g. a zero-norm row fed to l2 normalization).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Out-of-range label or index.
    #[error("index error: {0}")]
    Index(String),

    /// An API contract was violated (wrong call order, missing gradients, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A loss went non-finite during training.
    #[error("numeric divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error class (CLI contract).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence { .. } => 3,
            Error::Io(_) => 4,
            _ => 1,
        }
    }
}
