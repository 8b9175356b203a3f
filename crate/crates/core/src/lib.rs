//! Core library for a camera-localized swarm on a virtual grid.
//!
//! - [`geometry`]: rigid transforms, pinhole camera, grid mapping and overlay.
//! - [`localization`]: synthetic tag detections, multi-tag fusion, ground-frame
//!   localization and multi-camera chaining.
//! - [`planner`]: prioritized space-time A* with a reservation table.
//! - [`robot`]: differential-drive robot with encoder-step PID control.
//! - [`experiments`]: seeded Monte-Carlo studies built on the above.
//! - [`par`]: trial runner, rayon-backed with the `parallel` feature.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod experiments;
pub mod geometry;
pub mod localization;
pub mod par;
pub mod planner;
pub mod robot;
pub mod rng;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct RobotId(pub u32);

impl fmt::Display for RobotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "robot{}", self.0)
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TagId(pub u32);

impl fmt::Display for TagId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tag{}", self.0)
    }
}
