//! Pose-agnostic contrastive learning with a per-instance memory and
//! adversarial view adaptation, on deterministic synthetic two-view data.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod memory;
pub mod numeric;
pub mod pada;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
