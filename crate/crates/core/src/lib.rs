//! Failure-aware offline-to-online reinforcement learning on four 2D
//! manipulation-style tasks.
//!
//! The pipeline has two phases. Offline: behavior-clone a task policy and a
//! recovery policy from demonstrations and train a latent world model with a
//! constraint-prediction head on task and failure data. Online: fine-tune the
//! task policy with clipped policy-gradient updates while a safety shield
//! estimates the near-future constraint-violation probability of every
//! proposed action and swaps in the recovery policy when the estimate crosses
//! a threshold.

pub mod data;
pub mod envs;
pub mod error;
pub mod numerics;
pub mod policy;
pub mod shield;
pub mod trainer;
pub mod worldmodel;

pub use error::FarlError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, FarlError>;
