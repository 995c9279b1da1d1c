//! Panoptic post-processing and segmentation metrics.

pub mod ap;
pub mod miou;
pub mod panoptic;
pub mod pq;
pub mod vpq;
