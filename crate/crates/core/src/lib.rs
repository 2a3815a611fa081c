//! Range-image feature toolkit for spinning LiDAR: spherical projection,
//! training-pair generation, keypoint extraction, registration, pose-graph
//! mapping and benchmark metrics.

pub mod bench;
pub mod error;
pub mod features;
pub mod geom;
pub mod handcrafted;
pub mod io;
pub mod mapping;
pub mod pairgen;
pub mod projection;
pub mod register;
pub mod simlidar;
pub mod spatial;

pub use error::{Error, Result};
pub use features::{DenseFeatureMap, FeatureSet, Keypoint};
pub use geom::{OrderedPointCloud, Pose, RigidTransform};
pub use projection::{ScanImage, SphericalModel};
