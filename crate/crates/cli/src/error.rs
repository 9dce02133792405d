use degen_lab::LabError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("solver failure: {0}")]
    Solver(#[from] LabError),

    #[error("output error: {0}")]
    Output(#[from] std::io::Error),

    #[error("{} assertion(s) failed", .0.len())]
    Assertion(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) | CliError::Output(_) => 3,
            CliError::Assertion(_) => 1,
        }
    }
}

/// Classifies a core error raised while checking parameters.
pub fn config_error(e: LabError) -> CliError {
    CliError::Config(e.to_string())
}
