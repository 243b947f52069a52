use thiserror::Error;

/// Failures surfaced by the command line, each mapped to an exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
    #[error("stage `{stage}` infeasible: {message}")]
    Infeasible { stage: String, message: String },
}

impl CliError {
    pub fn stage(stage: &str, e: impl std::fmt::Display) -> Self {
        CliError::Stage {
            stage: stage.to_string(),
            message: e.to_string(),
        }
    }

    pub fn infeasible(stage: &str, e: impl std::fmt::Display) -> Self {
        CliError::Infeasible {
            stage: stage.to_string(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 3,
            CliError::Infeasible { .. } => 4,
        }
    }
}
