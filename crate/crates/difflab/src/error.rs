use thiserror::Error;

/// Errors shared across the whole library.
#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation (e.g. t outside [0,1]).
    #[error("domain error: {0}")]
    Domain(String),

    /// Structurally invalid argument (bad simplex, inconsistent ordering, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// An operator that must be inverted is singular.
    #[error("singular operator: {0}")]
    Singular(String),

    /// Conditioning on an event of probability zero.
    #[error("zero-probability conditioning event: {0}")]
    Conditioning(String),

    /// Query outside the support of a distribution.
    #[error("support error: {0}")]
    Support(String),

    /// Dense-state-space cap exceeded.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Non-finite value or numerical breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Integration drifted off the probability simplex.
    #[error("stability error: {0}")]
    Stability(String),

    /// A quantity that must be strictly positive was not.
    #[error("positivity error: {0}")]
    Positivity(String),

    /// Training diverged.
    #[error("training error: {0}")]
    Training(String),

    /// Bad run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
