//! Desk-scale laboratory for generalized few-shot 3D object detection on
//! LiDAR-style point clouds.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: boxes, frames, class tables and the planar metrics.
//! - [`synthgen`]: deterministic long-tail synthetic scenes and their on-disk format.
//! - [`ingest`]: nuScenes-schema metadata, class statistics, shots and N-way K-shot episodes.
//! - [`bevgrid`]: BEV feature grids, center-heatmap targets and box decoding.
//! - [`model`]: a small BEV detector with extractor / shared / base / novel parameter groups.
//! - [`loss`]: sample adaptive balance loss, focal loss, L1 regression, combined objective.
//! - [`train`]: two-stage training with one-cycle AdamW and copy-paste augmentation.
//! - [`eval`]: distance-threshold AP and the base / novel / combined aggregates.

pub mod bevgrid;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod ingest;
pub mod loss;
pub mod model;
pub mod seed;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{Box3D, ClassId, ClassRole, ClassTable, FrameId, InstanceId, SceneFrame};
