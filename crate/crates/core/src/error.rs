use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum TjapError {
    /// An argument violated a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// An iterative solver ran out of iterations. The last iterate is kept so
    /// callers can inspect or reuse it.
    #[error("{solver} did not converge after {iterations} iterations (residual {residual:.3e})")]
    Convergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
        last_iterate: Vec<f64>,
    },

    /// Observations or rollovers arrived out of order.
    #[error("sequencing error: {0}")]
    Sequencing(String),

    /// The request is too large for an exhaustive routine.
    #[error("refused: {0}")]
    Refused(String),

    /// Scenario generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Estimation failure at an episode boundary.
    #[error("episode {episode}: {source}")]
    Episode {
        episode: usize,
        #[source]
        source: Box<TjapError>,
    },

    /// A policy failure during a simulated run.
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<TjapError>,
    },

    /// Experiment outputs disagree with each other.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TjapError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(TjapError::Domain(msg.into()))
}
