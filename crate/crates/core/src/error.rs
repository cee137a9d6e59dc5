use thiserror::Error;

/// Errors surfaced by the training pipeline.
#[derive(Debug, Error)]
pub enum FarlError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("demo generator failed: {0}")]
    Generator(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
