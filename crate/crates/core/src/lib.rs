//! Semi-supervised lidar 3D detection from shared backbone features.
//!
//! Vehicles run a frozen voxel backbone and ship the resulting BEV feature
//! map together with their detections. The server never sees raw points of
//! unlabeled scenes. It augments each received feature map with
//! feature-level ground-truth sampling (GT-only features overwritten onto
//! the scene feature), supervises it with hybrid pseudo labels (filtered
//! detections plus the inserted, exactly known GT boxes), and trains only
//! the detection head.
//!
//! Module map:
//!
//! * [`geometry`] - oriented boxes, rotated IoU, NMS
//! * [`voxelgrid`] - voxelization and BEV compression
//! * [`backbone`] - deterministic sparse 3D conv backbone (grid and set features)
//! * [`gtbank`] - GT database and overlap-free placement sampling
//! * [`augment`] - raw and feature-level augmentations, F-GT, RMSE analysis
//! * [`pseudolabel`] - confidence filtering and hybrid label sets
//! * [`detector`] - anchor head, losses, analytic gradients, training step
//! * [`eval`] - matching and average precision
//! * [`fleet`] - synthetic scenes, client inference, the full SSL loop
//! * [`io`] - payload/checkpoint/database codecs, point and label readers, config files
//! * [`par`] - data-parallel helpers with a sequential fallback

pub mod augment;
pub mod backbone;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fleet;
pub mod geometry;
pub mod gtbank;
pub mod io;
pub mod par;
pub mod pseudolabel;
pub mod rng;
pub mod voxelgrid;

pub use error::{Error, Result};
pub use geometry::{Box3D, Detection, Point3};
pub use voxelgrid::{BevFeature, GridSpec, SparseVoxelGrid};
