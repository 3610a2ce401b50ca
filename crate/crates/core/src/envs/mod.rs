//! Environment contract and the two built-in environments.

pub mod episode;
pub mod proposition;
pub mod skirmish;

pub use episode::{EpisodeBatch, EpisodeBuilder};
pub use proposition::{ObsMode, PropositionConfig, PropositionGame};
pub use skirmish::{Skirmish, SkirmishConfig, Unit, UnitKind};

use crate::action_space::{AvailableActionMask, UnifiedActionSpace};
use crate::error::Result;

/// Hard cap on episode length for every environment.
pub const MAX_EPISODE_STEPS: usize = 200;

/// What every agent sees at one time step, plus the global state.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeStep {
    pub obs: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    /// Dynamic masks (static group mask ∧ current availability).
    pub avail: Vec<AvailableActionMask>,
    pub alive: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub terminated: bool,
    /// Terminated by the step cap rather than by the game.
    pub truncated: bool,
    pub won: bool,
    pub next: TimeStep,
}

/// A cooperative Dec-POMDP with a shared team reward.
pub trait Environment {
    fn action_space(&self) -> &UnifiedActionSpace;
    fn n_agents(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn episode_limit(&self) -> usize;
    /// Deterministic given `seed`.
    fn reset(&mut self, seed: u64) -> Result<TimeStep>;
    /// Every action must be available under the agent's current mask.
    fn step(&mut self, actions: &[usize]) -> Result<StepResult>;
}
