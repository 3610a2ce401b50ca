//! U-QMIX: shared recurrent Q network over the action space layout, monotonic
//! mixer, episodic replay, ε-greedy exploration, optional value-form
//! cross-group inverse loss.

use log::debug;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::buffer::ReplayBuffer;
use super::hyper::{AblationFlags, UQmixHyperparameters};
use super::losses::{cgi_value_loss, td_loss, uqmix_total_loss};
use super::metrics::{Instrumentation, MetricsRecord};
use super::rollout::{run_episode, unroll, ActionSelection, OutputKind, PaddedBatch};
use super::schedule::{decayed_lr, EpsilonSchedule};
use super::train::{init_rng, inverse_targets, GroupLayout, InverseTargets, Learner, LossGraph};
use crate::envs::{EpisodeBatch, Environment};
use crate::error::{Error, Result};
use crate::grad::{Adam, Bound, ParameterSet, Tape, Tensor, Var};
use crate::nets::{Mixer, NetConfig, Predictor, TargetParameters, Trunk, HIDDEN};

pub use super::mappo::CGI_SCOPE;

/// Parameter prefixes the target network copies.
pub const TARGET_PREFIXES: [&str; 2] = ["agent.", "mixer."];

pub struct UQmix {
    hp: UQmixHyperparameters,
    flags: AblationFlags,
    net: NetConfig,
    params: ParameterSet,
    target: TargetParameters,
    adam: Adam,
    buffer: ReplayBuffer,
    layout: GroupLayout,
    counters: Instrumentation,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QmixLosses {
    pub total: f64,
    pub td: f64,
    pub cgi: Option<f64>,
}

impl UQmix {
    pub fn new(
        env: &dyn Environment,
        hp: UQmixHyperparameters,
        flags: AblationFlags,
        agent_id: bool,
        seed: u64,
    ) -> Result<Self> {
        hp.validate()?;
        let space = env.action_space();
        if space.kind() != flags.layout() {
            return Err(Error::Config(format!(
                "environment layout {:?} does not match flags {}",
                space.kind(),
                flags.label()
            )));
        }
        let net = NetConfig {
            obs_dim: env.obs_dim(),
            state_dim: env.state_dim(),
            n_actions: space.size(),
            n_agents: env.n_agents(),
            agent_id,
            hidden: HIDDEN,
            predictor: flags.use_cgi,
            critic: false,
            mixer: true,
        };
        let params = net.init(&mut init_rng(seed));
        let target = TargetParameters::new(&params.subset(&TARGET_PREFIXES));
        Ok(Self {
            buffer: ReplayBuffer::new(hp.buffer_size)?,
            hp,
            flags,
            net,
            params,
            target,
            adam: Adam::new(),
            layout: GroupLayout::of(env),
            counters: Instrumentation::default(),
        })
    }

    pub fn hyperparameters(&self) -> &UQmixHyperparameters {
        &self.hp
    }

    pub fn flags(&self) -> AblationFlags {
        self.flags
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn target(&self) -> &TargetParameters {
        &self.target
    }

    pub fn set_params(&mut self, params: ParameterSet) -> Result<()> {
        self.net.check(&params)?;
        self.params = params;
        self.target.sync(&self.params.subset(&TARGET_PREFIXES))
    }

    /// Replaces the online parameters, leaving the target network as it is.
    pub fn replace_online(&mut self, params: ParameterSet) -> Result<()> {
        self.net.check(&params)?;
        self.params = params;
        Ok(())
    }

    pub fn epsilon(&self) -> f64 {
        EpsilonSchedule {
            start: self.hp.eps_start,
            end: self.hp.eps_end,
            steps: self.hp.eps_anneal_steps,
        }
        .at(self.counters.env_steps)
    }

    pub fn learning_rate(&self) -> f64 {
        decayed_lr(self.hp.lr, self.hp.lr_decay, self.hp.lr_decay_episodes, self.counters.episodes)
    }

    fn cgi_active(&self) -> bool {
        self.flags.use_cgi && self.hp.lambda_i > 0.0 && self.layout.n_groups() > 1
    }

    /// TD targets `y` for every (t, e), t-major, from the target network.
    pub fn td_targets(&self, batch: &PaddedBatch) -> Result<Vec<f64>> {
        let (e_count, t_max, n) = (batch.n_episodes(), batch.t_max, batch.n_agents);
        let a = self.net.n_actions;
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(self.target.params());
        let trunk = Trunk::bind(&bound)?;
        let mixer = Mixer::bind(&bound)?;
        let steps = unroll(&mut tape, &trunk, &self.net, batch, t_max + 1)?;
        let mut y = vec![0.0; t_max * e_count];
        for t in 0..t_max {
            let q = tape.value(steps[t + 1].0).clone();
            let keep = batch.keep(t + 1);
            let best: Vec<f64> = (0..batch.rows())
                .map(|r| {
                    q.row(r)
                        .iter()
                        .zip(&keep[r * a..(r + 1) * a])
                        .filter(|(_, &k)| k)
                        .map(|(&v, _)| v)
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            let qv = tape.constant(Tensor::matrix(e_count, n, best)?);
            let s = tape.constant(batch.states(self.net.state_dim, t + 1)?);
            let tot = mixer.forward(&mut tape, qv, s)?;
            for (e, ep) in batch.episodes.iter().enumerate() {
                if t >= ep.len() {
                    continue;
                }
                let r = ep.rewards[t] * self.hp.reward_scale;
                let last = t + 1 == ep.len();
                let bootstrap = !last || ep.truncated;
                y[t * e_count + e] = if bootstrap {
                    r + self.hp.gamma * tape.value(tot).data()[e]
                } else {
                    r
                };
            }
        }
        Ok(y)
    }

    /// TD (and inverse) loss on a fresh tape with the current parameters
    /// bound as trainable.
    pub fn loss_graph(&mut self, episodes: &[&EpisodeBatch]) -> Result<LossGraph> {
        self.loss_graph_pinned(episodes, None)
    }

    /// [`Self::loss_graph`] with the inverse-loss targets taken from
    /// `pinned` instead of the current outputs. Finite-difference checks use
    /// this to hold detached quantities fixed.
    pub fn loss_graph_pinned(&mut self, episodes: &[&EpisodeBatch], pinned: Option<&InverseTargets>) -> Result<LossGraph> {
        let batch = PaddedBatch::new(episodes.to_vec())?;
        let (e_count, t_max, n) = (batch.n_episodes(), batch.t_max, batch.n_agents);
        let targets = self.td_targets(&batch)?;
        let weights: Vec<f64> = (0..t_max)
            .flat_map(|t| (0..e_count).map(move |e| (t, e)))
            .map(|(t, e)| if batch.is_step(e, t) { 1.0 } else { 0.0 })
            .collect();

        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let trunk = Trunk::bind(&bound)?;
        let mixer = Mixer::bind(&bound)?;
        let steps = unroll(&mut tape, &trunk, &self.net, &batch, t_max)?;
        let mut q_tots = Vec::with_capacity(t_max);
        for (t, &(q, _)) in steps.iter().enumerate() {
            let chosen = tape.gather(q, &batch.actions(t))?;
            let chosen = tape.reshape(chosen, &[e_count, n])?;
            let s = tape.constant(batch.states(self.net.state_dim, t)?);
            q_tots.push(mixer.forward(&mut tape, chosen, s)?);
        }
        let q_tot = tape.concat_rows(&q_tots)?;
        let td = td_loss(&mut tape, q_tot, &targets, &weights)?;

        let (cgi, inverse) = if self.cgi_active() {
            let hs: Vec<Var> = steps.iter().map(|s| s.1).collect();
            let mut qs = Vec::with_capacity(t_max * batch.rows() * self.net.n_actions);
            let mut acting = Vec::with_capacity(t_max * batch.rows());
            for (t, &(q, _)) in steps.iter().enumerate() {
                qs.extend_from_slice(tape.value(q).data());
                acting.extend(batch.acting(t));
            }
            let (c, t) = self.cgi_term(&mut tape, &bound, &hs, &qs, pinned, &acting)?;
            (Some(c), Some(t))
        } else {
            (None, None)
        };
        let total = uqmix_total_loss(&mut tape, td, cgi, self.hp.lambda_i)?;
        Ok(LossGraph {
            tape,
            bound,
            total,
            actor: None,
            value: None,
            td: Some(td),
            cgi,
            entropy: None,
            inverse,
        })
    }

    /// One gradient step on a batch of stored episodes, then the target
    /// schedule.
    pub fn update(&mut self, episodes: &[&EpisodeBatch]) -> Result<QmixLosses> {
        let mut g = self.loss_graph(episodes)?;
        let total = g.value(g.total);
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "uqmix_update" });
        }
        let losses = QmixLosses {
            total,
            td: g.td.map_or(0.0, |v| g.value(v)),
            cgi: g.cgi.map(|v| g.value(v)),
        };
        let grads = g.gradients(self.hp.max_grad_norm)?;
        let lr = self.learning_rate();
        debug!("uqmix update: loss {total:.6}, lr {lr:e}");
        self.adam.step(&mut self.params, &grads, lr)?;
        self.counters.updates += 1;

        self.target.tick();
        if self.target.since_sync() >= self.hp.target_sync_interval {
            self.target.sync(&self.params.subset(&TARGET_PREFIXES))?;
            self.counters.target_syncs += 1;
        }
        Ok(losses)
    }

    fn cgi_term(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        hs: &[Var],
        qs: &[f64],
        pinned: Option<&InverseTargets>,
        acting: &[bool],
    ) -> Result<(Var, InverseTargets)> {
        tape.set_scope(Some(CGI_SCOPE));
        let result = (|| {
            let predictor = Predictor::bind(bound)?;
            let h = tape.concat_rows(hs)?;
            let pred = predictor.forward(tape, h)?;
            let slots = vec![pred; self.layout.n_groups()];
            let pred = tape.concat_rows(&slots)?;
            let t = match pinned {
                Some(t) => t.clone(),
                None => inverse_targets(&self.layout, self.net.n_agents, self.net.n_actions, qs, acting),
            };
            Ok((cgi_value_loss(tape, pred, &t.target, &t.keep)?, t))
        })();
        tape.set_scope(None);
        self.counters.cgi_evaluations += 1;
        result
    }
}

impl Learner for UQmix {
    fn net(&self) -> &NetConfig {
        &self.net
    }

    fn params(&self) -> &ParameterSet {
        &self.params
    }

    fn output_kind(&self) -> OutputKind {
        OutputKind::Values
    }

    fn counters(&self) -> &Instrumentation {
        &self.counters
    }

    fn iterate(&mut self, env: &mut dyn Environment, rng: &mut ChaCha8Rng) -> Result<MetricsRecord> {
        let eps = self.epsilon();
        let seed = rng.gen();
        let ep = run_episode(
            env,
            &self.net,
            &self.params,
            seed,
            OutputKind::Values,
            ActionSelection::EpsilonGreedy(eps),
            rng,
            &mut self.counters,
        )?;
        self.buffer.push(ep)?;
        let mut rec = MetricsRecord {
            epsilon: Some(eps),
            ..Default::default()
        };
        if self.buffer.len() >= self.hp.batch_size {
            // Lend the buffer out so the update can borrow its episodes.
            let buffer = std::mem::replace(&mut self.buffer, ReplayBuffer::new(1)?);
            let sampled = buffer.sample(rng, self.hp.batch_size);
            let l = sampled.and_then(|refs| self.update(&refs));
            self.buffer = buffer;
            let l = l?;
            rec.loss_total = Some(l.total);
            rec.loss_td = Some(l.td);
            rec.loss_cgi = l.cgi;
        }
        Ok(rec)
    }
}
