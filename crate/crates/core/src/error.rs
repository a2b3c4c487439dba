use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("kernel matrix is not positive definite ({0})")]
    FactorizationFailure(String),

    #[error("periodic latent dimensions requested but the dataset has no phase column")]
    MissingPhase,

    #[error("objective is not finite; check data scaling")]
    NonFiniteObjective,

    #[error("goal region is not reachable from any free cell")]
    UnreachableGoal,

    #[error("desirability at the start state is zero: no feasible trajectory")]
    AllZeroDesirability,

    #[error("state {state} at step {step} has zero desirability mass ahead")]
    DeadEndState { step: usize, state: usize },

    #[error("no feasible path: every terminal score is -inf")]
    NoFeasiblePath,

    #[error("all particle weights are zero at step {step}")]
    DegenerateWeights { step: usize },

    #[error("invalid level schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
