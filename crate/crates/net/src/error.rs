use thiserror::Error;

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no input phases")]
    EmptyPhases,

    #[error("batch-norm running statistics for {0} are uninitialized; run training first")]
    UninitializedStats(String),

    #[error("training diverged at batch {batch}: loss = {loss}")]
    Divergence { batch: usize, loss: f64 },

    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Core(#[from] hpvd_core::Error),
}
