//! Geometry-aware semantic correspondence over dense feature maps.
//!
//! The crate covers matching keypoints between images from pre-extracted
//! descriptor grids, test-time pose alignment, geometry-aware evaluation,
//! benchmark construction from keypoint annotations, and training a small
//! refinement network on top of frozen features.

pub mod benchgen;
pub mod error;
pub mod geoware;
pub mod matcher;
pub mod metrics;
pub mod npy;
pub mod par;
pub mod pose;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, GridPoint, ImagePoint, InstanceMask, Sampling, ViewTransform};
