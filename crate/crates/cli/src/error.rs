use thiserror::Error;

/// Failure classes, each with its own exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Declared checks failed; the report is still written.
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("invalid input: {0}")]
    Parse(String),
    #[error("internal error: {0:#}")]
    Internal(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Parse(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

/// Sorts library errors into input problems, failed checks and internal faults.
impl From<dsol::Error> for CliError {
    fn from(e: dsol::Error) -> Self {
        use dsol::Error as E;
        match e {
            E::Parse(_) | E::Io(_) | E::Json(_) | E::Dimension(_) | E::InvalidDecomposition(_) | E::Schedule(_) => {
                CliError::Parse(e.to_string())
            }
            E::NotSigmaValued { .. } | E::Certificate(_) | E::NonConvergence(_) | E::NotCauchy(_) | E::NotRankOnePositive(_) => {
                CliError::CheckFailed(e.to_string())
            }
            other => CliError::Internal(anyhow::Error::new(other)),
        }
    }
}
