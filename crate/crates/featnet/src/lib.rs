//! Fully convolutional joint keypoint detector and descriptor for
//! two-channel (range, intensity) scan images, with its training loss and
//! optimizer.

pub mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod network;
pub mod train;
pub mod weights;

pub use data::{augment, crop_sample, normalize, AugmentConfig, DatasetStats, TrainSample};
pub use error::{NetError, Result};
pub use loss::{pair_loss, LossBreakdown, LossConfig};
pub use network::{LayerSpec, Network, NetworkConfig};
pub use train::{synthetic_pairs, train, PairSample, TrainConfig, TrainReport};
