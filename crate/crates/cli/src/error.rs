use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{origin}:{line}:{column}: {message}")]
    Parse { origin: String, line: usize, column: usize, message: String },
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn invalid(field: impl Into<String>, msg: impl Into<String>) -> Self {
        CliError::Validation(format!("{}: {}", field.into(), msg.into()))
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Validation(_) | CliError::Io(_) => EXIT_VALIDATION,
            CliError::Backend(_) => EXIT_BACKEND,
            CliError::Verify(_) => EXIT_VERIFY,
        }
    }
}
