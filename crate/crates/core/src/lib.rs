//! Simulation and theory toolkit for in-context linear regression with a
//! single-layer linear self-attention (LSA) model, post-trained either on
//! supervised chain-of-thought targets (SFT) or on its own rollout outcome
//! (OS).

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluator;
#[cfg(feature = "harness")]
pub mod harness;
pub mod lsa;
pub mod numerics;
pub mod os;
mod par;
pub mod sft;
pub mod task;
pub mod theory;

pub use error::{Error, Result};
