use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] nrmatch_core::CoreError),
    #[error(transparent)]
    Tensor(#[from] nrmatch_tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image file: {0}")]
    Image(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
