//! Multi-camera markerless motion capture toolkit.
//!
//! Turns per-camera 2D landmark detections and calibration-board corner
//! observations into synchronized, calibrated 3D marker trajectories, and
//! computes tracking-quality metrics and kinematic features.

pub mod calibration;
pub mod geometry;
pub mod scalar;
pub mod metrics;
pub mod sync;
pub mod trajectory;
pub mod triangulation;
pub mod features;
pub mod synthetic;
pub mod pipeline;
