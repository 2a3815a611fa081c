use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("weights do not match the network config: {0}")]
    ShapeMismatch(String),

    #[error("invalid network config: {0}")]
    Config(String),

    #[error("flow has no valid correspondences")]
    NoValidCorrespondences,

    #[error("channel {channel} has degenerate statistics (std {std})")]
    DegenerateStats { channel: usize, std: f64 },

    #[error("loss {loss} at step {step} exceeds 10x the initial loss {initial}")]
    Divergence { step: usize, loss: f64, initial: f64 },

    #[error("no training samples")]
    EmptyStream,

    #[error("malformed weights file: {0}")]
    Format(String),

    #[error(transparent)]
    Core(#[from] scanfeat_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;
