use thiserror::Error;

/// Errors surfaced by the voxel, model, expansion and agent layers.
#[derive(Debug, Error)]
pub enum QteError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, QteError>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(QteError::Config(msg.into()))
}
