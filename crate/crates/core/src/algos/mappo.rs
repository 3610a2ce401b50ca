//! U-MAPPO: shared recurrent actor over the action space layout, centralized
//! state-value critic, clipped PPO updates, optional cross-group inverse loss.

use log::debug;
use rand_chacha::ChaCha8Rng;

use super::gae::{compute_gae, standardize};
use super::hyper::{AblationFlags, UMappoHyperparameters};
use super::losses::{
    cgi_policy_loss, masked_entropy, masked_log_policy, ppo_actor_loss, umappo_total_loss, value_loss,
    weighted_mean,
};
use super::metrics::{Instrumentation, MetricsRecord};
use super::rollout::{run_episode, unroll, ActionSelection, OutputKind, PaddedBatch};
use super::train::{init_rng, inverse_targets, GroupLayout, InverseTargets, Learner, LossGraph};
use crate::envs::{EpisodeBatch, Environment};
use crate::error::{Error, Result};
use crate::grad::{Adam, Bound, ParameterSet, Tape, Var};
use crate::nets::{Critic, NetConfig, Predictor, Trunk, HIDDEN};

/// Tape scope holding every inverse-loss node.
pub const CGI_SCOPE: &str = "cgi";

pub struct UMappo {
    hp: UMappoHyperparameters,
    flags: AblationFlags,
    net: NetConfig,
    params: ParameterSet,
    adam: Adam,
    layout: GroupLayout,
    counters: Instrumentation,
}

/// Per-round fixtures: behaviour log-probabilities, standardized
/// advantages and returns, and row weights, all laid out t-major.
pub struct MappoFixtures<'a> {
    pub batch: PaddedBatch<'a>,
    pub old_logp: Vec<f64>,
    pub row_adv: Vec<f64>,
    /// 1 for agent rows that acted (alive, within the episode).
    pub row_w: Vec<f64>,
    pub actions: Vec<usize>,
    pub keep: Vec<bool>,
    pub acting: Vec<bool>,
    /// 1 for (t, e) pairs within the episode.
    pub step_w: Vec<f64>,
    pub v_old: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Loss values of one update round, averaged over its epochs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MappoLosses {
    pub total: f64,
    pub actor: f64,
    pub value: f64,
    pub cgi: Option<f64>,
    pub entropy: f64,
}

impl UMappo {
    /// `agent_id` appends a one-hot agent index to the actor input.
    pub fn new(
        env: &dyn Environment,
        hp: UMappoHyperparameters,
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
            critic: true,
            mixer: false,
        };
        let params = net.init(&mut init_rng(seed));
        Ok(Self {
            hp,
            flags,
            net,
            params,
            adam: Adam::new(),
            layout: GroupLayout::of(env),
            counters: Instrumentation::default(),
        })
    }

    pub fn hyperparameters(&self) -> &UMappoHyperparameters {
        &self.hp
    }

    pub fn flags(&self) -> AblationFlags {
        self.flags
    }

    /// Replaces the parameters (e.g. from a checkpoint); shapes must match.
    pub fn set_params(&mut self, params: ParameterSet) -> Result<()> {
        self.net.check(&params)?;
        self.params = params;
        Ok(())
    }

    fn cgi_active(&self) -> bool {
        self.flags.use_cgi && self.hp.lambda_i > 0.0 && self.layout.n_groups() > 1
    }

    /// Behaviour statistics and advantages for a batch of complete
    /// on-policy episodes, computed once per update round.
    pub fn prepare<'a>(&self, episodes: &'a [EpisodeBatch]) -> Result<MappoFixtures<'a>> {
        let batch = PaddedBatch::new(episodes.iter().collect())?;
        let (e_count, t_max, rows) = (batch.n_episodes(), batch.t_max, batch.rows());
        let a = self.net.n_actions;

        let (old_logp, values) = {
            let mut tape = Tape::new();
            let bound = tape.bind_frozen(&self.params);
            let trunk = Trunk::bind(&bound)?;
            let critic = Critic::bind(&bound)?;
            let steps = unroll(&mut tape, &trunk, &self.net, &batch, t_max)?;
            let mut old = Vec::with_capacity(t_max * rows);
            for (t, &(out, _)) in steps.iter().enumerate() {
                let lp = masked_log_policy(&mut tape, out, &batch.keep(t))?;
                let taken = tape.gather(lp, &batch.actions(t))?;
                old.extend_from_slice(tape.value(taken).data());
            }
            let states = states_through(&mut tape, &batch, self.net.state_dim, t_max + 1)?;
            let v = critic.forward(&mut tape, states)?;
            (old, tape.value(v).data().to_vec())
        };
        // Values are laid out [t][e] for t in 0..=t_max.
        let v_at = |t: usize, e: usize| values[t * e_count + e];

        let mut adv = vec![0.0; t_max * e_count];
        let mut ret = vec![0.0; t_max * e_count];
        let mut flat_adv = Vec::new();
        for (e, ep) in batch.episodes.iter().enumerate() {
            let len = ep.len();
            let rewards: Vec<f64> = ep.rewards.iter().map(|r| r * self.hp.reward_scale).collect();
            let mut vs: Vec<f64> = (0..len).map(|t| v_at(t, e)).collect();
            vs.push(if ep.truncated { v_at(len, e) } else { 0.0 });
            let (a_e, r_e) = compute_gae(&rewards, &vs, self.hp.gamma, self.hp.gae_lambda)?;
            for t in 0..len {
                adv[t * e_count + e] = a_e[t];
                ret[t * e_count + e] = r_e[t];
            }
            flat_adv.extend_from_slice(&a_e);
        }
        standardize(&mut flat_adv);
        let mut k = 0;
        for (e, ep) in batch.episodes.iter().enumerate() {
            for t in 0..ep.len() {
                adv[t * e_count + e] = flat_adv[k];
                k += 1;
            }
        }

        let mut row_w = Vec::with_capacity(t_max * rows);
        let mut row_adv = Vec::with_capacity(t_max * rows);
        let mut actions = Vec::with_capacity(t_max * rows);
        let mut keep = Vec::with_capacity(t_max * rows * a);
        let mut acting = Vec::with_capacity(t_max * rows);
        for t in 0..t_max {
            let act = batch.acting(t);
            for (r, &alive) in act.iter().enumerate() {
                row_w.push(if alive { 1.0 } else { 0.0 });
                row_adv.push(adv[t * e_count + r / batch.n_agents]);
            }
            acting.extend_from_slice(&act);
            actions.extend(batch.actions(t));
            keep.extend(batch.keep(t));
        }
        let step_w = (0..t_max)
            .flat_map(|t| (0..e_count).map(move |e| (t, e)))
            .map(|(t, e)| if batch.is_step(e, t) { 1.0 } else { 0.0 })
            .collect();
        let v_old = values[..t_max * e_count].to_vec();
        Ok(MappoFixtures {
            batch,
            old_logp,
            row_adv,
            row_w,
            actions,
            keep,
            acting,
            step_w,
            v_old,
            returns: ret,
        })
    }

    /// Builds the full loss on a fresh tape with the current parameters
    /// bound as trainable.
    pub fn loss_graph(&mut self, fx: &MappoFixtures) -> Result<LossGraph> {
        self.loss_graph_pinned(fx, None)
    }

    /// [`Self::loss_graph`] with the inverse-loss targets taken from
    /// `pinned` instead of the current outputs. Finite-difference checks use
    /// this to hold detached quantities fixed.
    pub fn loss_graph_pinned(&mut self, fx: &MappoFixtures, pinned: Option<&InverseTargets>) -> Result<LossGraph> {
        let t_max = fx.batch.t_max;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let trunk = Trunk::bind(&bound)?;
        let critic = Critic::bind(&bound)?;
        let steps = unroll(&mut tape, &trunk, &self.net, &fx.batch, t_max)?;
        let outs: Vec<Var> = steps.iter().map(|s| s.0).collect();
        let logits = tape.concat_rows(&outs)?;
        let lp = masked_log_policy(&mut tape, logits, &fx.keep)?;
        let logp = tape.gather(lp, &fx.actions)?;
        let ent = masked_entropy(&mut tape, lp, &fx.keep)?;
        let actor = ppo_actor_loss(
            &mut tape,
            logp,
            &fx.old_logp,
            &fx.row_adv,
            ent,
            &fx.row_w,
            self.hp.eps_p,
            self.hp.lambda_e,
        )?;
        let entropy = weighted_mean(&mut tape, ent, &fx.row_w)?;

        let states = states_through(&mut tape, &fx.batch, self.net.state_dim, t_max)?;
        let v = critic.forward(&mut tape, states)?;
        let value = value_loss(&mut tape, v, &fx.v_old, &fx.returns, &fx.step_w, self.hp.eps_v)?;

        let (cgi, inverse) = if self.cgi_active() {
            let hs: Vec<Var> = steps.iter().map(|s| s.1).collect();
            let probs: Vec<f64> = tape.value(lp).data().iter().map(|l| l.exp()).collect();
            let (c, t) = self.cgi_term(&mut tape, &bound, &hs, &probs, pinned, &fx.acting)?;
            (Some(c), Some(t))
        } else {
            (None, None)
        };
        let total = umappo_total_loss(&mut tape, actor, value, cgi, self.hp.lambda_v, self.hp.lambda_i)?;
        Ok(LossGraph {
            tape,
            bound,
            total,
            actor: Some(actor),
            value: Some(value),
            td: None,
            cgi,
            entropy: Some(entropy),
            inverse,
        })
    }

    /// One update round: `ppo_epochs` gradient steps on the same batch.
    pub fn update(&mut self, episodes: &[EpisodeBatch]) -> Result<MappoLosses> {
        let fx = self.prepare(episodes)?;
        let mut acc = MappoLosses::default();
        let mut cgi_sum = None;
        for _ in 0..self.hp.ppo_epochs {
            let mut g = self.loss_graph(&fx)?;
            let total_v = g.value(g.total);
            if !total_v.is_finite() {
                return Err(Error::NonFinite { op: "umappo_update" });
            }
            acc.total += total_v;
            acc.actor += g.actor.map_or(0.0, |v| g.value(v));
            acc.value += g.value.map_or(0.0, |v| g.value(v));
            acc.entropy += g.entropy.map_or(0.0, |v| g.value(v));
            if let Some(c) = g.cgi {
                *cgi_sum.get_or_insert(0.0) += g.value(c);
            }
            let grads = g.gradients(self.hp.max_grad_norm)?;
            debug!("umappo epoch: loss {total_v:.6}");
            self.adam.step(&mut self.params, &grads, self.hp.lr)?;
        }
        let k = self.hp.ppo_epochs as f64;
        self.counters.updates += 1;
        Ok(MappoLosses {
            total: acc.total / k,
            actor: acc.actor / k,
            value: acc.value / k,
            cgi: cgi_sum.map(|c: f64| c / k),
            entropy: acc.entropy / k,
        })
    }

    fn cgi_term(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        hs: &[Var],
        probs: &[f64],
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
                None => inverse_targets(&self.layout, self.net.n_agents, self.net.n_actions, probs, acting),
            };
            Ok((cgi_policy_loss(tape, pred, &t.target, &t.keep)?, t))
        })();
        tape.set_scope(None);
        self.counters.cgi_evaluations += 1;
        result
    }
}

impl Learner for UMappo {
    fn net(&self) -> &NetConfig {
        &self.net
    }

    fn params(&self) -> &ParameterSet {
        &self.params
    }

    fn output_kind(&self) -> OutputKind {
        OutputKind::Policy
    }

    fn counters(&self) -> &Instrumentation {
        &self.counters
    }

    fn iterate(&mut self, env: &mut dyn Environment, rng: &mut ChaCha8Rng) -> Result<MetricsRecord> {
        use rand::Rng;
        let mut episodes = Vec::with_capacity(self.hp.episodes_per_update);
        for _ in 0..self.hp.episodes_per_update {
            let seed = rng.gen();
            episodes.push(run_episode(
                env,
                &self.net,
                &self.params,
                seed,
                OutputKind::Policy,
                ActionSelection::Sample,
                rng,
                &mut self.counters,
            )?);
        }
        let l = self.update(&episodes)?;
        Ok(MetricsRecord {
            loss_total: Some(l.total),
            loss_actor: Some(l.actor),
            loss_value: Some(l.value),
            loss_cgi: l.cgi,
            entropy: Some(l.entropy),
            ..Default::default()
        })
    }
}

/// States for `t < steps`, stacked t-major into `[steps * E, S]`.
fn states_through(tape: &mut Tape, batch: &PaddedBatch, state_dim: usize, steps: usize) -> Result<Var> {
    let parts: Vec<Var> = (0..steps)
        .map(|t| Ok(tape.constant(batch.states(state_dim, t)?)))
        .collect::<Result<_>>()?;
    tape.concat_rows(&parts)
}
