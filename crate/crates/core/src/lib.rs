//! Sequential, context-conditioned object detection at desk scale: a
//! two-stage detector, a spatial memory with convolutional-GRU writes, a
//! residual context network fused into the detector's heads, learned
//! de-duplication, and the training/evaluation harness on synthetic scenes.

pub mod boxes;
pub mod config;
pub mod checkpoint;
pub mod dataset;
pub mod context;
pub mod detector;
pub mod digest;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod memory;
pub mod methods;
pub mod plot;
pub mod rng;
pub mod rollout;
pub mod scene;
pub mod targets;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
