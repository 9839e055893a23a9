use thiserror::Error;

/// Failures of a CLI run, each mapped to a process exit code.
#[derive(Error, Debug)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<dlnm_lps::error::Error> for CliError {
    fn from(e: dlnm_lps::error::Error) -> Self {
        use dlnm_lps::error::Error as E;
        let msg = e.to_string();
        match e {
            E::Argument(_) | E::Spec(_) | E::Domain { .. } => CliError::Config(msg),
            E::Shape(_) | E::Consistency(_) | E::Category { .. } | E::Scoring(_) => CliError::Data(msg),
            E::Evaluation(_) | E::NotPositiveDefinite(_) | E::NoConvergence { .. } => CliError::Numerical(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
