use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("aggregator mismatch: expected {expected} outcomes")]
    ModeMismatch { expected: &'static str },

    #[error("exact enumeration needs {compositions} compositions (limit {limit}); use Monte Carlo instead")]
    EnumerationTooLarge { compositions: u128, limit: u128 },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },

    #[error("infeasible budget {budget}: at least {minimal} completions are required ({detail})")]
    InfeasibleBudget {
        budget: u64,
        minimal: u64,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
