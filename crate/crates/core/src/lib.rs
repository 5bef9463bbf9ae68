//! Core library for omnidirectional vertical-stereo depth estimation:
//! equirectangular geometry, a small autodiff engine, the two-view network,
//! training loops, synthetic scenes, metrics, and dataset IO.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod synthdata;
pub mod trainer;
pub mod viz;

pub use error::{CoreError, Result};
