//! Gaze-contingent neural scene synthesis on concentric spheres.

pub mod compositor;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod foveation;
pub mod image;
pub mod math;
pub mod metrics;
pub mod neural_field;
pub mod nn;
pub mod optimizer;
pub mod protocol;
pub mod raymarch;
pub mod sphgeom;
pub mod timing;

pub use error::{Error, Result};
