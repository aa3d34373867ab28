//! Off-policy n-step TD and natural actor-critic on finite MDPs.
//!
//! Every sampled algorithm has an exact linear-algebra counterpart computed
//! from the known model, so learned quantities can be compared against
//! ground truth and against the finite-sample bounds the algorithms come with.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actor;
pub mod critic;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod model_io;
pub mod sampler;

pub use error::{Error, Result};
