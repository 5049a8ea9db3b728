use thiserror::Error;

/// Errors produced anywhere in the observer pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive definite (failed at pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("matrix is singular to working precision")]
    Singular,

    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
    },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no admissible observer design: {0}")]
    NoDesign(String),

    #[error("gram matrix ill-conditioned even with jitter {jitter:e}")]
    IllConditionedGram { jitter: f64 },

    #[error("simulation diverged at step {step} (state norm {norm:e})")]
    Divergence { step: usize, norm: f64 },

    #[error("learning aborted: {0}")]
    LearningAbort(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
