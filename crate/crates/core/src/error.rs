use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation (bad group index, wrong field kind).
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A documented precondition of the operation does not hold for the given inputs.
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("step called on a finished episode; reset the environment first")]
    EpisodeFinished,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
