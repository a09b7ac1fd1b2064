//! Data pipeline around a multi-group lidar 3D detector: class-balanced
//! epoch sampling, ground-plane-aware object pasting, voxelization, anchor
//! targets, loss and schedule math, rotated NMS decoding, and center-distance
//! evaluation.

pub mod anchors;
pub mod config;
pub mod dataset;
pub mod decode;
pub mod error;
pub mod eval;
pub mod flat;
pub mod geometry;
pub mod ground;
pub mod gt_aug;
pub mod loss;
pub mod model;
pub mod render;
pub mod sampler;
pub mod voxel;

pub use config::{PipelineConfig, PointRange, VoxelConfig};
pub use dataset::{DatasetIndex, PointCloudSample};
pub use error::{Error, Result};
pub use model::{Attribute, Box3D, ClassCatalog, ClassId, Point};
