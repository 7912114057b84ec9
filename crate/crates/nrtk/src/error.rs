use std::path::Path;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    IoFailure { path: String, message: String },
    #[error("{0}")]
    MalformedConfig(String),
    #[error(transparent)]
    Core(#[from] nrtk_core::Error),
}

impl CliError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::IoFailure { path: path.display().to_string(), message: err.to_string() }
    }

    /// Structured error name, printed on stderr.
    pub fn name(&self) -> &'static str {
        match self {
            CliError::IoFailure { .. } => "IoFailure",
            CliError::MalformedConfig(_) => "MalformedConfig",
            CliError::Core(e) => e.name(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MalformedConfig(_) => 2,
            _ => 1,
        }
    }
}
