use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension must be at least 1")]
    EmptyDimension,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value at index {index}")]
    NumericOverflow { index: usize },

    #[error("unsupported capability: {0}")]
    Capability(String),

    #[error("infeasible partition: {clients} clients for {samples} samples")]
    InfeasiblePartition { clients: usize, samples: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("history integrity: {0}")]
    HistoryIntegrity(String),

    #[error("protocol order: {0}")]
    ProtocolOrder(String),

    #[error("truncated frame: needed {needed} bytes, had {available}")]
    Framing { needed: usize, available: usize },

    #[error("unknown message tag {0}")]
    ProtocolVersion(u8),

    #[error("corrupt frame: {0}")]
    Corruption(String),

    #[error("round {round} aborted: {reason}")]
    RoundAborted { round: u64, reason: String },

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code used by the CLI: 2 for configuration errors, 3 for
    /// everything that goes wrong while the protocol is running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::EmptyDimension | Error::InfeasiblePartition { .. } => 2,
            _ => 3,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
