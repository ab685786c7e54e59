//! Desk-scale laboratory for training–inference mismatch in policy-gradient
//! training.
//!
//! A small autoregressive softmax policy is evaluated by two numerical
//! "engines" (a training engine and a rollout engine) whose arithmetic can be
//! made to diverge. On top of that the crate provides:
//!
//! * [`toyenv`]: exactly enumerable token MDPs and a synthetic generation task,
//! * [`policy`]: the policy, its engines, analytic score functions and sampling,
//! * [`estimators`]: REINFORCE and its importance-sampling variants, RLOO, PPO clip,
//! * [`monitor`]: log perplexity, mismatch indicator, gradient-norm EMA, surge detection,
//! * [`scheduler`]: the length-triggered halving learning-rate schedule,
//! * [`oracle`]: exact-enumeration checks of the horizon bound and its lemmas,
//!   plus Monte-Carlo checks of the noisy-gradient decomposition,
//! * [`harness`]: the training loop, experiment suites and report writers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimators;
pub mod harness;
pub mod monitor;
pub mod numerics;
pub mod oracle;
pub mod policy;
pub mod scheduler;
pub mod toyenv;

pub use error::{Error, Result};
