use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied something outside an operation's preconditions.
    #[error("invalid input: {0}")]
    Input(String),

    /// Argument outside a mathematical function's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The sampled-only target failed to produce a response.
    #[error("generation failed for prompt {prompt}: {reason}")]
    Generation { prompt: String, reason: String },

    /// A metric is undefined for the given labels (e.g. a single class).
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// Training blew up; carries the offending step and loss values.
    #[error("training diverged at step {step}: total loss {loss} exceeds {limit}")]
    Divergence { step: usize, loss: f64, limit: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
