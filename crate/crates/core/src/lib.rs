//! Depth estimation from a fused event-camera and frame-camera view of a
//! scene, with a synthetic data pipeline for end-to-end exercise on a CPU.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod estimator;
pub mod events;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod train;
pub mod tokens;

pub use error::{Error, Result};
