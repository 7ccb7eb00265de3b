use std::process::ExitCode;

use sepfit::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad config, unreadable or malformed data, invalid options.
    #[error("{0}")]
    Input(String),
    /// Rank failure under the strict policy.
    #[error("{0}")]
    Rank(String),
    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Input(_) | CliError::Output(_) => ExitCode::from(1),
            CliError::Rank(_) => ExitCode::from(3),
        }
    }
}

fn is_rank(e: &Error) -> bool {
    match e {
        Error::RankDeficient { .. } => true,
        Error::File { source, .. } => is_rank(source),
        _ => false,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if is_rank(&e) {
            CliError::Rank(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}
