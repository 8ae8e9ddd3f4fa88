use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ctkit_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("missing input file {0}")]
    MissingInput(String),
    #[error("bad input {path}: {reason}")]
    BadInput { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Stable short tag for the one-line error report.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(_) => "core",
            CliError::Config(_) => "config",
            CliError::MissingInput(_) => "missing_input",
            CliError::BadInput { .. } => "bad_input",
            CliError::Io(_) => "io",
            CliError::Csv(_) => "csv",
            CliError::Json(_) => "json",
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
