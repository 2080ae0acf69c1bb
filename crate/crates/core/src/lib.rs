//! Barrier-synchronized vectorized simulation.
//!
//! * [`env`]: the stepped-scenario hooks and the decision-step contract.
//! * [`lander`], [`tracker`]: the two built-in environments.
//! * [`exec`]: driver/worker pool, wire protocol and transports.
//! * [`opt`]: TPE and cross-entropy drivers running over a pool.

pub mod env;
pub mod exec;
pub mod lander;
pub mod opt;
pub mod rng;
pub mod tracker;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
