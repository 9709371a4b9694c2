//! Non-neural core of a dynamic-scene mapping pipeline.
//!
//! Given per-frame priors (depth, camera pose, optical flow, confidence,
//! global visual features and keypoint matches) this crate
//!
//! * segments independently moving regions with three progressively
//!   refined motion cues ([`motioncue`]),
//! * stores, recalls and updates static scenes in a persistent memory bank
//!   ([`membank`], backed by [`icp`] for geometric verification),
//! * refines the camera trajectory with a robust factor graph over static
//!   landmarks ([`posegraph`]).
//!
//! [`synth`] renders deterministic scenes with exact ground truth, and
//! [`pipeline`] wires everything together and owns the on-disk formats.
//!
//! Pose convention: a [`geometry::Pose`] used as a camera extrinsic maps
//! world coordinates into the camera frame (`p_cam = E * p_world`).

pub mod geometry;
pub mod grid;
pub mod icp;
pub mod membank;
pub mod metrics;
pub mod motioncue;
pub mod par;
pub mod pipeline;
pub mod posegraph;
pub mod synth;

pub use geometry::{Intrinsics, Pose};
pub use grid::{Grid, Mask};
