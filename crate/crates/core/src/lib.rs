//! Multitask camera/radar fusion in the BEV-polar domain.
//!
//! A radar encoder-decoder recovers range-azimuth features from the complex
//! range-Doppler cube, a variational encoder-decoder learns the front-view to
//! BEV-polar mapping for the camera, and two heads on the concatenated
//! features predict vehicle positions and drivable free space.

pub mod checkpoint;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
