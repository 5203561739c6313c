//! VoxelNet-style 3D object detection on LiDAR point clouds.
//!
//! The pipeline: crop a KITTI cloud, bucket it into a sparse voxel buffer with
//! a single hash pass, encode each voxel with stacked VFE layers, run 3D
//! middle convolutions and a region proposal network, and decode anchor
//! residuals into oriented boxes.

pub mod augment;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io_kitti;
pub mod nn;
pub mod selfcheck;
pub mod targets;
pub mod trainer;
pub mod vfe;
pub mod voxel;

pub use error::{Error, Result};
