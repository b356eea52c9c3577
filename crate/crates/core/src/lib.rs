//! Activation-entropy reliability monitoring for convolutional networks.
//!
//! The monitor reads post-ReLU activations at selected layers, reduces each
//! batch to a Shannon entropy over adaptive histogram bins, compares it
//! against clean baseline profiles and flags batches whose entropy crosses a
//! calibrated per-layer threshold.

pub mod detect;
pub mod dump;
pub mod entropy;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod profile;

pub use error::{Error, Result};
