use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error at {pointer}: {message}")]
    Validation { pointer: String, message: String },
    #[error("runtime error on link {link}: {message}")]
    LinkRuntime { link: String, message: String },
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ScenarioError {
    pub fn validation(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Validation {
            pointer: pointer.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 for schema/validation, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Schema(_) | ScenarioError::Validation { .. } => 2,
            _ => 3,
        }
    }
}
