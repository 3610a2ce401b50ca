//! Acting in an environment with the shared agent network, and padded
//! time-major views over stored episodes for training.

use rand::Rng;
use serde::Serialize;

use super::metrics::Instrumentation;
use crate::action_space::{mask_policy, mask_q_argmax, AvailableActionMask, InputKind};
use crate::envs::{EpisodeBatch, EpisodeBuilder, Environment, TimeStep};
use crate::error::{Error, Result};
use crate::grad::{ParameterSet, Tape, Tensor, Var};
use crate::nets::{NetConfig, Trunk};

/// What the trunk's output means.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    /// Logits of a policy.
    Policy,
    /// Per-action values.
    Values,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActionSelection {
    /// Draw from the masked policy.
    Sample,
    /// Highest available output; ties to the lowest index.
    Greedy,
    /// Uniform over available actions with probability ε, greedy otherwise.
    EpsilonGreedy(f64),
}

fn select<R: Rng + ?Sized>(
    out: &[f64],
    mask: &AvailableActionMask,
    kind: OutputKind,
    selection: ActionSelection,
    rng: &mut R,
) -> Result<usize> {
    match (selection, kind) {
        (ActionSelection::Sample, OutputKind::Policy) => {
            Ok(mask_policy(out, mask, InputKind::Logits)?.sample(rng))
        }
        (ActionSelection::Sample, OutputKind::Values) => Err(Error::contract(
            "select_action",
            "sampling needs a policy output",
        )),
        (ActionSelection::Greedy, _) => mask_q_argmax(out, mask),
        (ActionSelection::EpsilonGreedy(eps), _) => {
            if rng.gen::<f64>() < eps {
                let idx = mask.indices();
                if idx.is_empty() {
                    return Err(Error::contract("select_action", "mask has no available action"));
                }
                Ok(idx[rng.gen_range(0..idx.len())])
            } else {
                mask_q_argmax(out, mask)
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
/// Plays one episode with the agent parameters in `params` (no gradients).
pub fn run_episode<R: Rng + ?Sized>(
    env: &mut dyn Environment,
    net: &NetConfig,
    params: &ParameterSet,
    env_seed: u64,
    kind: OutputKind,
    selection: ActionSelection,
    rng: &mut R,
    counters: &mut Instrumentation,
) -> Result<EpisodeBatch> {
    let n = env.n_agents();
    let mut ts = env.reset(env_seed)?;
    let mut builder = EpisodeBuilder::new(&ts, net.obs_dim, net.state_dim, net.n_actions, net.hidden);
    let mut tape = Tape::new();
    let bound = tape.bind_frozen(&params.subset(&["agent."]));
    let trunk = Trunk::bind(&bound)?;
    let mut h = trunk.initial_hidden(&mut tape, n);
    let mut last: Vec<Option<usize>> = vec![None; n];
    let in_dim = net.input_dim();
    let mut obs32 = Vec::new();
    loop {
        let mut x = vec![0.0; n * in_dim];
        for (i, row) in x.chunks_mut(in_dim).enumerate() {
            obs32.clear();
            obs32.extend(ts.obs[i].iter().map(|&v| v as f32));
            net.fill_input(row, &obs32, last[i], i);
        }
        let xv = tape.constant(Tensor::matrix(n, in_dim, x)?);
        let (out, hn) = trunk.step(&mut tape, xv, h)?;
        h = hn;
        let outs = tape.value(out).clone();
        let mut actions = Vec::with_capacity(n);
        for i in 0..n {
            let a = select(outs.row(i), &ts.avail[i], kind, selection, rng)?;
            if !ts.avail[i].get(a) {
                counters.illegal_actions += 1;
            }
            actions.push(a);
        }
        let result = env.step(&actions)?;
        counters.env_steps += 1;
        builder.push(&actions, tape.value(h).data(), &result)?;
        for (l, &a) in last.iter_mut().zip(&actions) {
            *l = Some(a);
        }
        if result.terminated {
            break;
        }
        ts = result.next;
    }
    counters.episodes += 1;
    builder.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub episodes: usize,
    pub win_rate: f64,
    pub mean_return: f64,
    pub mean_length: f64,
}

/// A deterministic joint policy used for evaluation.
pub trait GreedyPolicy {
    /// Called at the start of every episode.
    fn begin(&mut self, first: &TimeStep) -> Result<()>;
    fn act(&mut self, ts: &TimeStep) -> Result<Vec<usize>>;
}

/// Argmax over the masked outputs of the shared agent network.
///
/// The argmax of masked logits and of masked values is the same rule, so
/// one policy serves both trainers.
pub struct NetPolicy<'a> {
    net: &'a NetConfig,
    agent: ParameterSet,
    state: Option<(Tape, Trunk, Var)>,
    last: Vec<Option<usize>>,
}

impl<'a> NetPolicy<'a> {
    pub fn new(net: &'a NetConfig, params: &ParameterSet) -> Result<Self> {
        net.check(params)?;
        Ok(Self {
            net,
            agent: params.subset(&["agent."]),
            state: None,
            last: Vec::new(),
        })
    }
}

impl GreedyPolicy for NetPolicy<'_> {
    fn begin(&mut self, first: &TimeStep) -> Result<()> {
        let n = first.obs.len();
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.agent);
        let trunk = Trunk::bind(&bound)?;
        let h = trunk.initial_hidden(&mut tape, n);
        self.state = Some((tape, trunk, h));
        self.last = vec![None; n];
        Ok(())
    }

    fn act(&mut self, ts: &TimeStep) -> Result<Vec<usize>> {
        let (tape, trunk, h) = self
            .state
            .as_mut()
            .ok_or_else(|| Error::contract("greedy_act", "act before begin"))?;
        let n = self.last.len();
        let in_dim = self.net.input_dim();
        let mut x = vec![0.0; n * in_dim];
        for (i, row) in x.chunks_mut(in_dim).enumerate() {
            let obs32: Vec<f32> = ts.obs[i].iter().map(|&v| v as f32).collect();
            self.net.fill_input(row, &obs32, self.last[i], i);
        }
        let xv = tape.constant(Tensor::matrix(n, in_dim, x)?);
        let (out, hn) = trunk.step(tape, xv, *h)?;
        *h = hn;
        let outs = tape.value(out);
        let actions = (0..n)
            .map(|i| mask_q_argmax(outs.row(i), &ts.avail[i]))
            .collect::<Result<Vec<_>>>()?;
        for (l, &a) in self.last.iter_mut().zip(&actions) {
            *l = Some(a);
        }
        Ok(actions)
    }
}

/// Plays one episode per seed with `policy`, counting wins, return and
/// length. Actions outside a dynamic mask are a contract violation.
pub fn evaluate_policy(
    env: &mut dyn Environment,
    policy: &mut dyn GreedyPolicy,
    seeds: &[u64],
) -> Result<EvalResult> {
    let (mut wins, mut ret, mut len) = (0usize, 0.0, 0usize);
    for &s in seeds {
        let mut ts = env.reset(s)?;
        policy.begin(&ts)?;
        loop {
            let actions = policy.act(&ts)?;
            for (i, &a) in actions.iter().enumerate() {
                if !ts.avail[i].get(a) {
                    return Err(Error::contract("evaluate", format!("agent {i} chose unavailable action {a}")));
                }
            }
            let r = env.step(&actions)?;
            ret += r.reward;
            len += 1;
            if r.terminated {
                wins += r.won as usize;
                break;
            }
            ts = r.next;
        }
    }
    let k = seeds.len().max(1) as f64;
    Ok(EvalResult {
        episodes: seeds.len(),
        win_rate: wins as f64 / k,
        mean_return: ret / k,
        mean_length: len as f64 / k,
    })
}

/// Greedy evaluation of the shared network over the given environment
/// seeds; parameters are only read.
pub fn evaluate(
    env: &mut dyn Environment,
    net: &NetConfig,
    params: &ParameterSet,
    seeds: &[u64],
) -> Result<EvalResult> {
    evaluate_policy(env, &mut NetPolicy::new(net, params)?, seeds)
}

/// Several episodes laid out time-major with zero padding past each end.
///
/// Row `e * n + i` is agent `i` of episode `e`.
pub struct PaddedBatch<'a> {
    pub episodes: Vec<&'a EpisodeBatch>,
    pub n_agents: usize,
    pub n_actions: usize,
    pub t_max: usize,
}

impl<'a> PaddedBatch<'a> {
    pub fn new(episodes: Vec<&'a EpisodeBatch>) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| Error::contract("padded_batch", "no episodes"))?;
        let (n, a) = (first.n_agents, first.n_actions);
        if episodes.iter().any(|e| e.n_agents != n || e.n_actions != a) {
            return Err(Error::contract("padded_batch", "episodes disagree on shapes"));
        }
        let t_max = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
        Ok(Self {
            episodes,
            n_agents: n,
            n_actions: a,
            t_max,
        })
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn rows(&self) -> usize {
        self.episodes.len() * self.n_agents
    }

    /// Step `t` of episode `e` was actually taken.
    pub fn is_step(&self, e: usize, t: usize) -> bool {
        t < self.episodes[e].len()
    }

    /// Trunk inputs at time `t` (`t` may be the final observation).
    pub fn inputs(&self, net: &NetConfig, t: usize) -> Result<Tensor> {
        let d = net.input_dim();
        let mut x = vec![0.0; self.rows() * d];
        for (e, ep) in self.episodes.iter().enumerate() {
            if t > ep.len() {
                continue;
            }
            for i in 0..self.n_agents {
                let r = e * self.n_agents + i;
                let last = (t > 0).then(|| ep.action_at(t - 1, i));
                net.fill_input(&mut x[r * d..(r + 1) * d], ep.obs_at(t, i), last, i);
            }
        }
        Tensor::matrix(self.rows(), d, x)
    }

    /// Global states at time `t`, one row per episode.
    pub fn states(&self, state_dim: usize, t: usize) -> Result<Tensor> {
        let mut s = vec![0.0; self.n_episodes() * state_dim];
        for (e, ep) in self.episodes.iter().enumerate() {
            if t <= ep.len() {
                for (d, &v) in s[e * state_dim..(e + 1) * state_dim].iter_mut().zip(ep.state_at(t)) {
                    *d = v as f64;
                }
            }
        }
        Tensor::matrix(self.n_episodes(), state_dim, s)
    }

    /// Availability bits at time `t`, flattened `[R, A]`; padding rows keep
    /// everything so masked softmaxes stay well defined.
    pub fn keep(&self, t: usize) -> Vec<bool> {
        let mut k = Vec::with_capacity(self.rows() * self.n_actions);
        for ep in &self.episodes {
            for i in 0..self.n_agents {
                if t <= ep.len() {
                    k.extend_from_slice(ep.avail_at(t, i));
                } else {
                    k.extend(std::iter::repeat_n(true, self.n_actions));
                }
            }
        }
        k
    }

    /// Actions taken at `t` (0 for padding).
    pub fn actions(&self, t: usize) -> Vec<usize> {
        let mut a = Vec::with_capacity(self.rows());
        for ep in &self.episodes {
            for i in 0..self.n_agents {
                a.push(if t < ep.len() { ep.action_at(t, i) } else { 0 });
            }
        }
        a
    }

    /// Agent was alive when acting at step `t` (false for padding).
    pub fn acting(&self, t: usize) -> Vec<bool> {
        let mut v = Vec::with_capacity(self.rows());
        for ep in &self.episodes {
            for i in 0..self.n_agents {
                v.push(t < ep.len() && ep.alive_at(t, i));
            }
        }
        v
    }
}

/// Trunk outputs and hidden states for `steps` steps of a padded batch.
pub fn unroll(
    tape: &mut Tape,
    trunk: &Trunk,
    net: &NetConfig,
    batch: &PaddedBatch,
    steps: usize,
) -> Result<Vec<(Var, Var)>> {
    let mut h = trunk.initial_hidden(tape, batch.rows());
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = tape.constant(batch.inputs(net, t)?);
        let (o, hn) = trunk.step(tape, x, h)?;
        out.push((o, hn));
        h = hn;
    }
    Ok(out)
}
