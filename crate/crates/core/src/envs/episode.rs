//! Time-major storage for one complete episode.
//!
//! Observations, states and hidden states are kept as `f32` to bound replay
//! memory; every value the environments produce is exactly representable or
//! only used as network input.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{StepResult, TimeStep};
use crate::action_space::AvailableActionMask;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeBatch {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub n_actions: usize,
    pub hidden_dim: usize,
    /// `[T+1][n][obs_dim]`
    pub obs: Vec<f32>,
    /// `[T+1][state_dim]`
    pub states: Vec<f32>,
    /// `[T+1][n][n_actions]`
    pub avail: Vec<bool>,
    /// `[T+1][n]`
    pub alive: Vec<bool>,
    /// `[T][n]`
    pub actions: Vec<usize>,
    /// `[T]`
    pub rewards: Vec<f64>,
    /// `[T]`; set only on the last step.
    pub terminated: Vec<bool>,
    /// `[T][n][hidden_dim]`: recurrent state after consuming step t.
    pub hidden: Vec<f32>,
    pub truncated: bool,
    pub won: bool,
}

impl EpisodeBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn obs_at(&self, t: usize, agent: usize) -> &[f32] {
        let start = (t * self.n_agents + agent) * self.obs_dim;
        &self.obs[start..start + self.obs_dim]
    }

    pub fn state_at(&self, t: usize) -> &[f32] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn avail_at(&self, t: usize, agent: usize) -> &[bool] {
        let start = (t * self.n_agents + agent) * self.n_actions;
        &self.avail[start..start + self.n_actions]
    }

    pub fn alive_at(&self, t: usize, agent: usize) -> bool {
        self.alive[t * self.n_agents + agent]
    }

    pub fn action_at(&self, t: usize, agent: usize) -> usize {
        self.actions[t * self.n_agents + agent]
    }

    pub fn hidden_at(&self, t: usize, agent: usize) -> &[f32] {
        let start = (t * self.n_agents + agent) * self.hidden_dim;
        &self.hidden[start..start + self.hidden_dim]
    }

    /// Checks that every field agrees on T and the terminal flag is unique.
    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let n = self.n_agents;
        let checks = [
            ("obs", self.obs.len(), (t + 1) * n * self.obs_dim),
            ("states", self.states.len(), (t + 1) * self.state_dim),
            ("avail", self.avail.len(), (t + 1) * n * self.n_actions),
            ("alive", self.alive.len(), (t + 1) * n),
            ("actions", self.actions.len(), t * n),
            ("terminated", self.terminated.len(), t),
            ("hidden", self.hidden.len(), t * n * self.hidden_dim),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::contract(
                    "episode_batch",
                    format!("{name} has {got} entries, expected {want}"),
                ));
            }
        }
        if t == 0 {
            return Err(Error::contract("episode_batch", "episode has no steps"));
        }
        let flags = self.terminated.iter().filter(|&&f| f).count();
        if flags != 1 || !self.terminated[t - 1] {
            return Err(Error::contract(
                "episode_batch",
                "exactly one terminal flag, on the last step",
            ));
        }
        Ok(())
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(episodes: &[EpisodeBatch], mut out: W) -> Result<()> {
        for ep in episodes {
            serde_json::to_writer(&mut out, ep)?;
            out.write_all(b"\n")
                .map_err(|e| Error::io("<jsonl writer>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<EpisodeBatch>> {
        let mut out = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|e| Error::io("<jsonl reader>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ep: EpisodeBatch = serde_json::from_str(&line)?;
            ep.validate()?;
            out.push(ep);
        }
        Ok(out)
    }
}

/// Accumulates an episode step by step.
#[derive(Clone, Debug)]
pub struct EpisodeBuilder {
    ep: EpisodeBatch,
    finished: bool,
}

impl EpisodeBuilder {
    pub fn new(
        first: &TimeStep,
        obs_dim: usize,
        state_dim: usize,
        n_actions: usize,
        hidden_dim: usize,
    ) -> Self {
        let mut b = Self {
            ep: EpisodeBatch {
                n_agents: first.obs.len(),
                obs_dim,
                state_dim,
                n_actions,
                hidden_dim,
                obs: Vec::new(),
                states: Vec::new(),
                avail: Vec::new(),
                alive: Vec::new(),
                actions: Vec::new(),
                rewards: Vec::new(),
                terminated: Vec::new(),
                hidden: Vec::new(),
                truncated: false,
                won: false,
            },
            finished: false,
        };
        b.push_timestep(first);
        b
    }

    fn push_timestep(&mut self, ts: &TimeStep) {
        for o in &ts.obs {
            self.ep.obs.extend(o.iter().map(|&v| v as f32));
        }
        self.ep.states.extend(ts.state.iter().map(|&v| v as f32));
        for m in &ts.avail {
            self.ep.avail.extend_from_slice(m.bits());
        }
        self.ep.alive.extend_from_slice(&ts.alive);
    }

    /// Records the joint action taken at the current step, the recurrent
    /// states after that step (flattened `[n][hidden_dim]`), and its outcome.
    pub fn push(&mut self, actions: &[usize], hidden: &[f64], result: &StepResult) -> Result<()> {
        if self.finished {
            return Err(Error::contract("episode_builder", "episode already terminated"));
        }
        if actions.len() != self.ep.n_agents
            || hidden.len() != self.ep.n_agents * self.ep.hidden_dim
        {
            return Err(Error::contract("episode_builder", "per-agent field size mismatch"));
        }
        self.ep.actions.extend_from_slice(actions);
        self.ep.hidden.extend(hidden.iter().map(|&v| v as f32));
        self.ep.rewards.push(result.reward);
        self.ep.terminated.push(result.terminated);
        self.push_timestep(&result.next);
        if result.terminated {
            self.ep.truncated = result.truncated;
            self.ep.won = result.won;
            self.finished = true;
        }
        Ok(())
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn finish(self) -> Result<EpisodeBatch> {
        if !self.finished {
            return Err(Error::contract("episode_builder", "episode has not terminated"));
        }
        self.ep.validate()?;
        Ok(self.ep)
    }
}

/// Masks rebuilt from stored bits.
pub fn mask_of(bits: &[bool]) -> AvailableActionMask {
    AvailableActionMask::new(bits.to_vec())
}
