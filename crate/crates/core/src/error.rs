use thiserror::Error;
use vton_tensor::checkpoint::ContainerError;

#[derive(Debug, Error)]
pub enum VtonError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("failed precondition: {0}")]
    FailedPrecondition(String),
    #[error("training diverged in {phase} at step {step}: {loss_name} = {value}")]
    Diverged {
        phase: String,
        step: usize,
        loss_name: String,
        value: f64,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("png error: {0}")]
    Png(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = VtonError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> VtonError {
    VtonError::InvalidArgument(msg.into())
}

pub(crate) fn io_err(path: impl AsRef<std::path::Path>) -> impl FnOnce(std::io::Error) -> VtonError {
    let path = path.as_ref().display().to_string();
    move |source| VtonError::Io { path, source }
}
