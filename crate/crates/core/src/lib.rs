//! Pyramid squeeze attention (PSA), EPSA bottleneck networks and their baselines,
//! built from first principles on a small dense NCHW tensor type.
//!
//! The crate is `no_std` and only needs `alloc`. Everything that touches the
//! filesystem, the command line or a serialization format lives in the companion
//! `epsakit` crate.
//!
//! Module map:
//!
//! * [`tensor`]: the 4-D `f64` tensor and its elementwise/reshaping primitives.
//! * [`nn`]: operators with explicit backward passes and the finite-difference oracle.
//! * [`psa`]: SEWeight, the squeeze-and-concat extractor and the full PSA module.
//! * [`model`]: bottleneck blocks and the ResNet / SENet / EPSANet builders.
//! * [`complexity`]: analytic parameter and FLOP accounting.
//! * [`train`]: label-smoothed cross-entropy, SGD, the step schedule and a toy dataset.
//! * [`gradcheck`]: the finite-difference verification suite used by tests and the CLI.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod complexity;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod psa;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
