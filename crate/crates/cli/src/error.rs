use cxr_core::Error as CoreError;
use cxr_service::ServiceError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, inputs or configuration: exit 1.
    #[error("{0}")]
    User(String),
    /// Anything else: exit 2.
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }

    pub fn user(msg: impl Into<String>) -> Self {
        CliError::User(msg.into())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::ShapeMismatch(_) | CoreError::Diverged { .. } => CliError::Internal(msg),
            CoreError::Io(ref io) if io.kind() != std::io::ErrorKind::NotFound => CliError::Internal(msg),
            _ => CliError::User(msg),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Core(c) => c.into(),
            ServiceError::Io(io) => CliError::Internal(io.to_string()),
            ServiceError::Json(j) => CliError::Internal(j.to_string()),
            other => CliError::User(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::NotFound => CliError::User(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
