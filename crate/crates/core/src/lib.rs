//! Entropy-aware group relative policy optimization for flow-matching models.
//!
//! The crate is `no_std` (it only needs `alloc`) and contains every numerical
//! piece of the method:
//!
//! - [`schedule`]: shifted timestep grids, closed-form step entropy and the
//!   adaptive merge planner that folds low-entropy steps into single SDE steps.
//! - [`model`]: a small tanh MLP velocity field with hand-written reverse-mode
//!   gradients, decoupled-weight-decay Adam and rectified-flow pretraining.
//! - [`sampler`]: ODE and (merged) SDE stepping, Gaussian transition densities
//!   and rollout groups that share an ODE prefix.
//! - [`rewards`]: toy terminal rewards over final states.
//! - [`grpo`]: group-normalized advantages, importance ratios, the clipped
//!   surrogate and the training loop with its baseline strategies.
//!
//! IO, configuration and the command line live in the companion `egrpo` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod grpo;
pub mod model;
pub mod rewards;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
