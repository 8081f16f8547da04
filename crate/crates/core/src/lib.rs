//! Desk-scale gaze object prediction: a DETR-style object detector and a
//! transformer gaze autoencoder with object-to-gaze cross-attention, trained
//! jointly on synthetic retail scenes, with the full metric suite.

pub mod detector;
pub mod error;
pub mod gaze;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
