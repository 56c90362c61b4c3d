//! Spherical geometry, gaze datasets, eye-event detection, saliency maps
//! and scanpath metrics for 360° panoramas.

pub mod dataset;
pub mod events;
pub mod geometry;
pub mod metrics;
pub mod saliency;
