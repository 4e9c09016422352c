use thiserror::Error;

/// Failure of a command, classified by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, bad config file contents or inconsistent settings.
    #[error("usage: {0}")]
    Usage(String),
    /// Missing or malformed input files, unwritable outputs.
    #[error("data: {0}")]
    Data(String),
    /// Training or evaluation produced non-finite values.
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn data(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{context}: {e}"))
    }
}

impl From<lanegrid::Error> for CliError {
    fn from(e: lanegrid::Error) -> Self {
        use lanegrid::Error as E;
        let msg = e.to_string();
        match e {
            E::NonFinite { .. } => CliError::Numeric(msg),
            E::Io(_)
            | E::Image { .. }
            | E::Record { .. }
            | E::Checkpoint(_)
            | E::InvalidLane(_) => CliError::Data(msg),
            E::InvalidGrid(_) | E::OutOfRange { .. } | E::Shape { .. } | E::Config(_) => {
                CliError::Usage(msg)
            }
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
