//! Multi-agent reinforcement learning with a unified action space.
//!
//! Physically heterogeneous agents share one network whose output covers the
//! union of every group's actions; per-group available-action masks carve
//! out each agent's policy. A predictor branch learns to reproduce other
//! groups' policies (or Q values) from an agent's recurrent state.

pub mod action_space;
pub mod algos;
pub mod envs;
pub mod error;
pub mod grad;
pub mod harness;
pub mod nets;

pub use error::{Error, Result};
