use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Command failure, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Check(_) => 5,
        }
    }
}

impl From<duoflow::Error> for CliError {
    fn from(e: duoflow::Error) -> Self {
        use duoflow::Error as E;
        match e {
            E::Invalid(_) => CliError::Config(e.to_string()),
            E::Diverged { .. } | E::NonFinite { .. } | E::Numerical(_) | E::NonScalarLoss(_) => CliError::Numerical(e.to_string()),
            E::Shape { .. } | E::Format { .. } | E::Io(_) | E::Json(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
