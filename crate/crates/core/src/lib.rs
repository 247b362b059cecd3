//! Few-shot learning toolkit: prototype-based episodic inference with feature
//! calibration, embedding training with a mixed-feature consistency loss, and
//! a deterministic episodic evaluation harness.

pub mod calibration;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod hct;
pub mod numerics;
pub mod proto_inference;

pub use error::{Error, Result};
