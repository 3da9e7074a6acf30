//! Kinematic hand tracking from per-frame keypoint predictions.
//!
//! The pipeline mirrors a two-stage RGB-D hand tracker: heatmap-based root
//! localization with temporal outlier handling, camera/crop geometry, and an
//! energy-based fit of a 26-DOF kinematic skeleton to per-joint 3D/2D
//! predictions. A seeded synthetic observation generator stands in for the
//! learned predictors so the whole pipeline is testable end to end.

// index-based loops over parallel joint/parameter arrays read better here
#![allow(clippy::needless_range_loop)]

pub mod camera;
pub mod error;
pub mod eval;
pub mod localization;
pub mod optimizer;
pub mod skeleton;
pub mod stream;
pub mod synth;

pub use error::{Error, Result};
