use thiserror::Error;

/// Errors produced by the design library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    /// Importance weights collapsed onto too few draws to be trusted.
    #[error(
        "degenerate importance weights: effective sample size {ess:.1} from {samples} draws; \
         increase the importance sample count or widen the proposal"
    )]
    DegenerateWeights { ess: f64, samples: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
