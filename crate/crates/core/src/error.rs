use thiserror::Error;

/// Errors raised by the simulator and the exponent engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A scalar parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An input violated an operation's precondition (dimension mismatch,
    /// non-equidistant code where one is required, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The optimizer found no grid point satisfying its constraints.
    #[error("no feasible grid point: {0}")]
    Infeasible(String),

    /// Not enough usable data for a statistical fit.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
