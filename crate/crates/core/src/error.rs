use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("insufficient data: {0}")]
    Capacity(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("label source: {0}")]
    Labeler(String),
    #[error("numeric divergence at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
