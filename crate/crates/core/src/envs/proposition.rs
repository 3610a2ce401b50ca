//! One-step two-group coordination game.
//!
//! Groups G0 and G1 each hold `n` agents. G0 can take the first `a0` actions,
//! G1 all `a1` (`a1 > a0 >= n`). The team earns 1 only when every agent picks
//! the action whose index equals its within-group id.

use serde::{Deserialize, Serialize};

use super::{Environment, StepResult, TimeStep};
use crate::action_space::{
    mask_policy, ActionClass, GroupSpec, InputKind, LayoutKind, SemanticAction,
    UnifiedActionSpace,
};
use crate::error::{Error, Result};

/// What the shared policy is conditioned on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObsMode {
    /// A constant input: every agent sees the same thing.
    #[default]
    Blind,
    /// One-hot within-group id.
    Id,
    /// One-hot within-group id followed by a one-hot group.
    IdGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropositionConfig {
    pub n: usize,
    pub a0: usize,
    pub a1: usize,
    #[serde(default)]
    pub obs_mode: ObsMode,
}

impl Default for PropositionConfig {
    fn default() -> Self {
        Self {
            n: 2,
            a0: 4,
            a1: 6,
            obs_mode: ObsMode::Blind,
        }
    }
}

impl PropositionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("proposition game needs n >= 1".into()));
        }
        if self.a0 < self.n || self.a1 <= self.a0 {
            return Err(Error::Config(format!(
                "proposition game needs a1 > a0 >= n (got n={}, a0={}, a1={})",
                self.n, self.a0, self.a1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PropositionGame {
    cfg: PropositionConfig,
    uas: UnifiedActionSpace,
    done: bool,
}

impl PropositionGame {
    pub fn new(cfg: PropositionConfig, layout: LayoutKind) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n;
        let groups = [
            GroupSpec::new(0, &[] as &[ActionClass], (0..n).collect()),
            GroupSpec::new(1, &[], (n..2 * n).collect()),
        ];
        let uas = UnifiedActionSpace::from_choice_blocks(&groups, &[cfg.a0, cfg.a1], layout)?;
        Ok(Self {
            cfg,
            uas,
            done: true,
        })
    }

    pub fn config(&self) -> &PropositionConfig {
        &self.cfg
    }

    /// Within-group id of an agent.
    pub fn agent_id(&self, agent: usize) -> usize {
        agent % self.cfg.n
    }

    pub fn observation(&self, agent: usize) -> Vec<f64> {
        let n = self.cfg.n;
        match self.cfg.obs_mode {
            ObsMode::Blind => vec![1.0],
            ObsMode::Id => one_hot(self.agent_id(agent), n),
            ObsMode::IdGroup => {
                let mut v = one_hot(self.agent_id(agent), n);
                v.extend(one_hot(agent / n, 2));
                v
            }
        }
    }

    /// Team reward for a joint action of unified indices.
    pub fn reward(&self, actions: &[usize]) -> Result<f64> {
        if actions.len() != 2 * self.cfg.n {
            return Err(Error::contract(
                "proposition_reward",
                format!("{} actions for {} agents", actions.len(), 2 * self.cfg.n),
            ));
        }
        let mut all = true;
        for (agent, &a) in actions.iter().enumerate() {
            let g = self.uas.group_index_of(agent);
            match self.uas.decode(g, a) {
                Some(SemanticAction::Choice(k)) => all &= k == self.agent_id(agent),
                // Outside the group's actual action set: counts as a failure.
                _ => all = false,
            }
        }
        Ok(if all { 1.0 } else { 0.0 })
    }

    fn timestep(&self) -> TimeStep {
        let n_agents = 2 * self.cfg.n;
        TimeStep {
            obs: (0..n_agents).map(|i| self.observation(i)).collect(),
            state: vec![1.0],
            avail: (0..n_agents)
                .map(|i| self.uas.agent_static_mask(i).clone())
                .collect(),
            alive: vec![true; n_agents],
        }
    }
}

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

impl Environment for PropositionGame {
    fn action_space(&self) -> &UnifiedActionSpace {
        &self.uas
    }

    fn n_agents(&self) -> usize {
        2 * self.cfg.n
    }

    fn obs_dim(&self) -> usize {
        match self.cfg.obs_mode {
            ObsMode::Blind => 1,
            ObsMode::Id => self.cfg.n,
            ObsMode::IdGroup => self.cfg.n + 2,
        }
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn episode_limit(&self) -> usize {
        1
    }

    fn reset(&mut self, _seed: u64) -> Result<TimeStep> {
        self.done = false;
        Ok(self.timestep())
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if self.done {
            return Err(Error::contract("proposition_step", "episode already finished"));
        }
        for (agent, &a) in actions.iter().enumerate() {
            if a >= self.uas.size() || !self.uas.agent_static_mask(agent).get(a) {
                return Err(Error::contract(
                    "proposition_step",
                    format!("agent {agent} took unavailable action {a}"),
                ));
            }
        }
        let reward = self.reward(actions)?;
        self.done = true;
        Ok(StepResult {
            reward,
            terminated: true,
            truncated: false,
            won: reward > 0.0,
            next: self.timestep(),
        })
    }
}

/// Best expected reward of one unconditioned distribution shared by all 2n
/// agents: `(rho_r / n)^(2n)`.
pub fn analytic_shared_optimum(n: usize, rho_r: f64) -> f64 {
    (rho_r / n as f64).powi(2 * n as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BruteForceResult {
    pub max_reward: f64,
    pub argmax: Vec<f64>,
    pub grid_step: f64,
    pub analytic: f64,
    pub gap: f64,
    pub evaluated: u64,
}

/// Exhaustive search over the `resolution`-grid of the simplex on G1's
/// action set for the best shared, unconditioned distribution.
///
/// Both groups sample from the same distribution; a G0 agent drawing an
/// action outside its set fails the episode, so the expected reward is
/// `prod_{i<n} rho_i^2`.
pub fn brute_force_shared_optimum(
    n: usize,
    a0: usize,
    a1: usize,
    resolution: usize,
) -> Result<BruteForceResult> {
    PropositionConfig {
        n,
        a0,
        a1,
        obs_mode: ObsMode::Blind,
    }
    .validate()?;
    if resolution < 10 {
        return Err(Error::Config("grid resolution must be at least 10".into()));
    }
    let step = 1.0 / resolution as f64;
    let mut counts = vec![0usize; a1];
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut evaluated = 0u64;
    // Enumerate every composition of `resolution` into `a1` parts.
    fn visit(
        pos: usize,
        left: usize,
        counts: &mut [usize],
        f: &mut dyn FnMut(&[usize]),
    ) {
        if pos + 1 == counts.len() {
            counts[pos] = left;
            f(counts);
            return;
        }
        for c in 0..=left {
            counts[pos] = c;
            visit(pos + 1, left - c, counts, f);
        }
    }
    visit(0, resolution, &mut counts, &mut |c| {
        evaluated += 1;
        let j: f64 = c[..n].iter().map(|&k| (k as f64 * step).powi(2)).product();
        if j > best.0 {
            best = (j, c.iter().map(|&k| k as f64 * step).collect());
        }
    });
    let analytic = analytic_shared_optimum(n, 1.0);
    Ok(BruteForceResult {
        max_reward: best.0,
        argmax: best.1,
        grid_step: step,
        analytic,
        gap: (best.0 - analytic).abs(),
        evaluated,
    })
}

/// Expected reward of independent per-agent distributions, by enumerating
/// every joint action in their support.
pub fn expected_reward(game: &PropositionGame, policies: &[Vec<f64>]) -> Result<f64> {
    let supports: Vec<Vec<(usize, f64)>> = policies
        .iter()
        .map(|p| {
            p.iter()
                .copied()
                .enumerate()
                .filter(|&(_, q)| q > 0.0)
                .collect()
        })
        .collect();
    let mut total = 0.0;
    let mut joint = vec![0usize; policies.len()];
    fn rec(
        i: usize,
        prob: f64,
        supports: &[Vec<(usize, f64)>],
        joint: &mut [usize],
        game: &PropositionGame,
        total: &mut f64,
    ) -> Result<()> {
        if i == supports.len() {
            *total += prob * game.reward(joint)?;
            return Ok(());
        }
        for &(a, p) in &supports[i] {
            joint[i] = a;
            rec(i + 1, prob * p, supports, joint, game, total)?;
        }
        Ok(())
    }
    rec(0, 1.0, &supports, &mut joint, game, &mut total)?;
    Ok(total)
}

/// Expected reward of the deterministic per-id policy expressed through the
/// unified space and group masks.
///
/// One shared map from observation to a unified-space distribution puts
/// equal mass on action `id` of every group block; each group's mask then
/// turns it into a point mass. This needs the observation to carry the id.
pub fn uas_deterministic_optimum(
    n: usize,
    a0: usize,
    a1: usize,
    obs_mode: ObsMode,
) -> Result<f64> {
    let cfg = PropositionConfig { n, a0, a1, obs_mode };
    let game = PropositionGame::new(cfg, LayoutKind::Unified)?;
    if obs_mode == ObsMode::Blind {
        return Err(Error::Unreachable {
            reason: "a blind observation cannot tell agents apart, so a shared policy \
                     cannot map each agent to its own id"
                .into(),
            shared_bound: analytic_shared_optimum(n, 1.0),
        });
    }
    let uas = game.action_space();
    let shared_policy = |obs: &[f64]| -> Vec<f64> {
        // Reads only the id part of the observation.
        let id = obs[..n].iter().position(|&x| x == 1.0).unwrap_or(0);
        let mut d = vec![0.0; uas.size()];
        for b in uas.blocks() {
            d[b.offset + id] += 1.0 / uas.blocks().len() as f64;
        }
        d
    };
    let policies = (0..game.n_agents())
        .map(|i| {
            let d = shared_policy(&game.observation(i));
            mask_policy(&d, uas.agent_static_mask(i), InputKind::Distribution).map(|p| p.probs)
        })
        .collect::<Result<Vec<_>>>()?;
    expected_reward(&game, &policies)
}
