use thiserror::Error;

/// Errors produced by the core pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel (u={u}, v={v}) is not valid in the scan image")]
    InvalidPixel { u: usize, v: usize },

    #[error("point cloud has no valid points")]
    EmptyCloud,

    #[error("feature set is empty")]
    EmptySet,

    #[error("need at least 3 matches, got {0}")]
    TooFewMatches(usize),

    #[error("all RANSAC samples were degenerate after {0} attempts")]
    Degenerate(usize),

    #[error("no correspondences within {0} m")]
    NoCorrespondences(f64),

    #[error("need at least {needed} descriptors, got {got}")]
    TooFewDescriptors { needed: usize, got: usize },

    #[error("odometry chain is broken at step {0}")]
    BrokenChain(usize),

    #[error("damped normal equations are singular")]
    SingularSystem,

    #[error("trajectory lengths differ: {est} estimated vs {gt} ground truth")]
    LengthMismatch { est: usize, gt: usize },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
