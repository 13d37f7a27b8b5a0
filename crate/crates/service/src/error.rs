use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("missing checkpoint for stage {stage} version {version}: {path}")]
    MissingCheckpoint { stage: u8, version: String, path: String },

    #[error("store error: {0}")]
    Store(String),

    #[error(transparent)]
    Core(#[from] cxr_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ServiceError>;
