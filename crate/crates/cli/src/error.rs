use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] latentplan::Error),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::File { path: path.display().to_string(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use latentplan::Error as E;
        match self {
            CliError::Core(e) => match e {
                E::FactorizationFailure(_) | E::NonFiniteObjective => EXIT_NUMERICAL,
                E::NoFeasiblePath
                | E::DegenerateWeights { .. }
                | E::UnreachableGoal
                | E::AllZeroDesirability
                | E::DeadEndState { .. } => EXIT_INFEASIBLE,
                E::MissingPhase | E::InvalidSchedule(_) | E::InvalidInput(_) | E::Parse { .. } | E::Io(_) | E::Json(_) => EXIT_INPUT,
            },
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Input(_) | CliError::File { .. } | CliError::Json(_) | CliError::Csv(_) => EXIT_INPUT,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
