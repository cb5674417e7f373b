use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Stage { .. } => 3,
        }
    }

    pub fn stage(stage: &'static str, e: impl std::fmt::Display) -> Self {
        CliError::Stage {
            stage,
            message: e.to_string(),
        }
    }

    pub fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }
}
