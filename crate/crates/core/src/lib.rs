//! Core primitives for evaluating and tracking aerial multi-animal pose
//! estimates.
//!
//! Everything in this crate is a pure function over immutable values and
//! builds without `std` (an allocator is required). File formats, reports and
//! the command-line front end live in the `herdpose` companion crate.
//!
//! Modules:
//!
//! - [`geometry`]: boxes, keypoints, poses, instances, frame records and
//!   affine coordinate maps.
//! - [`dataset`]: validated datasets, prediction sets and the video-exclusive
//!   train/val/test split.
//! - [`framing`]: overlapping frame tiling and square per-animal patches.
//! - [`eval`]: NMS, confidence-greedy matching, average precision and
//!   per-keypoint RMSE / PCK / OKS.
//! - [`tracking`]: SORT-style Kalman tracker with optimal assignment and
//!   segment manifest export.
//! - [`synth`]: deterministic synthetic herd scenarios used as test oracles.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod assignment;
pub mod dataset;
pub mod eval;
pub mod framing;
pub mod geometry;
pub mod kalman;
pub mod synth;
pub mod tracking;

pub use geometry::{
    AffineMap, BBox, FrameKey, FrameRecord, GeometryError, Instance, InstanceKind, Keypoint, Point, Pose, Skeleton,
    Visibility, KEYPOINT_COUNT, KEYPOINT_NAMES,
};
