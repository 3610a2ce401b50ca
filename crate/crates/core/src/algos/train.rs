//! The outer loop shared by both trainers: iterate, evaluate on a fixed
//! step grid, report, checkpoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{Instrumentation, MetricsRecord, Observer};
use super::rollout::{evaluate, EvalResult, OutputKind};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::grad::{Bound, Gradients, ParameterSet, Tape, Var};
use crate::nets::NetConfig;

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Stop once an evaluation reaches this mean return.
    pub stop_at_return: Option<f64>,
    pub checkpoint_interval: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 200_000,
            eval_interval: 10_000,
            eval_episodes: 32,
            stop_at_return: None,
            checkpoint_interval: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(Error::Config(
                "total_steps, eval_interval and eval_episodes must be positive".into(),
            ));
        }
        if self.checkpoint_interval == Some(0) {
            return Err(Error::Config("checkpoint_interval must be positive".into()));
        }
        Ok(())
    }
}

/// Generator for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    stream(seed, INIT_STREAM)
}

/// Generator for everything stochastic during training.
pub fn train_rng(seed: u64) -> ChaCha8Rng {
    stream(seed, TRAIN_STREAM)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// The fixed environment seeds every evaluation of a run uses.
pub fn eval_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    let mut r = stream(seed, EVAL_STREAM);
    (0..episodes).map(|_| r.gen()).collect()
}

/// A trainer as seen by the outer loop.
pub trait Learner {
    fn net(&self) -> &NetConfig;
    fn params(&self) -> &ParameterSet;
    fn output_kind(&self) -> OutputKind;
    fn counters(&self) -> &Instrumentation;
    /// Collects experience and performs at most one update round. Fills the
    /// loss fields of the returned record.
    fn iterate(&mut self, env: &mut dyn Environment, rng: &mut ChaCha8Rng) -> Result<MetricsRecord>;
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub illegal_actions: u64,
    pub evals: Vec<(u64, EvalResult)>,
}

impl TrainSummary {
    pub fn final_eval(&self) -> Option<&EvalResult> {
        self.evals.last().map(|(_, e)| e)
    }
}

/// Runs `learner` until `total_steps` environment steps (or early stop).
/// Evaluations happen whenever the step count crosses a multiple of
/// `eval_interval`, and once more at the end if the last one is stale.
pub fn run_training(
    learner: &mut dyn Learner,
    env: &mut dyn Environment,
    eval_env: &mut dyn Environment,
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn Observer,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut rng = train_rng(seed);
    let seeds = eval_seeds(seed, cfg.eval_episodes);
    let mut evals = Vec::new();
    let mut next_eval = cfg.eval_interval;
    let mut next_ckpt = cfg.checkpoint_interval;
    let mut last_eval_step = None;
    loop {
        let mut rec = learner.iterate(env, &mut rng)?;
        let c = learner.counters().clone();
        rec.step = c.env_steps;
        rec.episode = c.episodes;
        rec.seed = seed;
        let done = c.env_steps >= cfg.total_steps;
        let mut stop = false;
        if c.env_steps >= next_eval || (done && last_eval_step != Some(c.env_steps)) {
            while next_eval <= c.env_steps {
                next_eval += cfg.eval_interval;
            }
            let r = evaluate(eval_env, learner.net(), learner.params(), &seeds)?;
            rec.eval_wr = Some(r.win_rate);
            rec.eval_return = Some(r.mean_return);
            stop = cfg.stop_at_return.is_some_and(|s| r.mean_return >= s);
            last_eval_step = Some(c.env_steps);
            evals.push((c.env_steps, r));
        }
        observer.record(&rec)?;
        if let Some(k) = next_ckpt.as_mut() {
            if c.env_steps >= *k {
                observer.checkpoint(c.env_steps, learner.params())?;
                let interval = cfg.checkpoint_interval.unwrap_or(1);
                while *k <= c.env_steps {
                    *k += interval;
                }
            }
        }
        if done || stop {
            let c = learner.counters();
            if c.illegal_actions > 0 {
                return Err(Error::contract(
                    "run_training",
                    format!("{} actions were selected outside their masks", c.illegal_actions),
                ));
            }
            return Ok(TrainSummary {
                seed,
                env_steps: c.env_steps,
                episodes: c.episodes,
                updates: c.updates,
                illegal_actions: c.illegal_actions,
                evals,
            });
        }
    }
}

/// Static-mask bookkeeping both trainers need for the inverse loss.
#[derive(Clone, Debug)]
pub(crate) struct GroupLayout {
    pub agent_group: Vec<usize>,
    pub static_masks: Vec<Vec<bool>>,
}

impl GroupLayout {
    pub fn of(env: &dyn Environment) -> Self {
        let space = env.action_space();
        let agent_group = (0..env.n_agents()).map(|i| space.group_index_of(i)).collect();
        let static_masks = (0..space.groups().len())
            .map(|g| space.static_mask(g).bits().to_vec())
            .collect();
        Self {
            agent_group,
            static_masks,
        }
    }

    pub fn n_groups(&self) -> usize {
        self.static_masks.len()
    }
}

/// Detached inverse-loss targets: one row per (group slot, batch row) with
/// the group-mean target and the kept entries.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseTargets {
    pub target: Vec<f64>,
    pub keep: Vec<bool>,
}

/// Builds [`InverseTargets`] from per-row target quantities (probabilities
/// or values), `[rows, A]` flattened; `acting` marks rows that exist and are
/// alive.
pub(crate) fn inverse_targets(
    layout: &GroupLayout,
    n_agents: usize,
    n_actions: usize,
    outputs: &[f64],
    acting: &[bool],
) -> InverseTargets {
    let rows = acting.len();
    let episodes = rows / n_agents;
    let g_count = layout.n_groups();
    let mut target = vec![0.0; g_count * rows * n_actions];
    let mut keep = vec![false; g_count * rows * n_actions];
    for g in 0..g_count {
        for e in 0..episodes {
            let members: Vec<usize> = (0..n_agents)
                .filter(|&j| layout.agent_group[j] == g && acting[e * n_agents + j])
                .map(|j| e * n_agents + j)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; n_actions];
            for &r in &members {
                for (m, v) in mean.iter_mut().zip(&outputs[r * n_actions..(r + 1) * n_actions]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= members.len() as f64);
            for i in 0..n_agents {
                let r = e * n_agents + i;
                if !acting[r] || layout.agent_group[i] == g {
                    continue;
                }
                let base = (g * rows + r) * n_actions;
                target[base..base + n_actions].copy_from_slice(&mean);
                keep[base..base + n_actions].copy_from_slice(&layout.static_masks[g]);
            }
        }
    }
    InverseTargets { target, keep }
}

/// A loss built on a fresh tape, with handles to its components.
pub struct LossGraph {
    pub tape: Tape,
    pub bound: Bound,
    pub total: Var,
    pub actor: Option<Var>,
    pub value: Option<Var>,
    pub td: Option<Var>,
    pub cgi: Option<Var>,
    pub entropy: Option<Var>,
    /// The detached targets the inverse loss used, if it was built.
    pub inverse: Option<InverseTargets>,
}

impl LossGraph {
    pub fn value(&self, v: Var) -> f64 {
        self.tape.value(v).item()
    }

    /// Differentiates `total`, returning gradients for every bound
    /// parameter clipped to `max_norm`.
    pub fn gradients(&mut self, max_norm: f64) -> Result<Gradients> {
        self.gradients_of(self.total, max_norm)
    }

    pub fn gradients_of(&mut self, root: Var, max_norm: f64) -> Result<Gradients> {
        self.tape.backward(root)?;
        let mut g = self.tape.gradients(&self.bound);
        g.clip_global_norm(max_norm);
        Ok(g)
    }
}
