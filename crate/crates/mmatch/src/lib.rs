//! Radar-assisted multi-vehicle perception fusion.
//!
//! Given radar+camera frames from two cooperating vehicles, the pipeline
//! separates moving-vehicle radar points from the stationary background via
//! their Doppler signature, matches co-visible vehicles across the two views
//! with a message-passing graph network, and estimates the inter-vehicle
//! rigid transform with a background-constrained iterative registration.
//! Frames come from the built-in deterministic traffic simulator, which also
//! provides ground truth for the RRE/RTE metrics.

pub mod align;
pub mod config;
pub mod dbscan;
pub mod geom;
pub mod net;
pub mod pipeline;
pub mod sep;
pub mod sim;
pub mod wire;
