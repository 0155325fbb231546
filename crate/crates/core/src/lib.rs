//! Desk-scale camera-to-voxel occupancy pipeline.
//!
//! The crate is organized bottom-up:
//!
//! * [`numgrad`]: dense `f64` tensors with a small reverse-mode tape.
//! * [`geometry`]: cameras, voxel grids, depth bins and BEV warping.
//! * [`lifting`]: occlusion-aware transfer matrices from pixels to voxels.
//! * [`semhead`]: prototype logits, hard-voxel sampling and Dice+BCE losses.
//! * [`flowhead`]: BEV collapse, cost volume and binned flow decoding.
//! * [`scenes`]: synthetic ground truth (voxelization, ray casting).
//! * [`metrics`]: mIoU, RayIoU, mAVE and the composite Occ Score.
//! * [`pipeline`]: run configuration, the toy model and its Adam fit.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flowhead;
pub mod geometry;
pub mod io;
pub mod lifting;
pub mod metrics;
pub mod numgrad;
pub mod pipeline;
pub mod scenes;
pub mod semhead;
pub mod svg;

pub use error::{Error, Result};
pub use numgrad::{Tape, Tensor, Var};
