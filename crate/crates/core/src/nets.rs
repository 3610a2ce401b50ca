//! Shared recurrent agent trunk, predictor branch, centralized critic and
//! monotonic mixer.
//!
//! Every network reads its parameters from a [`ParameterSet`] under a fixed
//! prefix (`agent.`, `predictor.`, `critic.`, `mixer.`), so one set can hold a
//! whole learner and subsets can be copied into target networks.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Bound, ParameterSet, Tape, Tensor, Var};

pub const HIDDEN: usize = 64;
pub const MIXER_EMBED: usize = 32;
pub const HYPER_HIDDEN: usize = 64;

const GAIN_HIDDEN: f64 = std::f64::consts::SQRT_2;
const GAIN_HEAD: f64 = 0.01;
const GAIN_UNIT: f64 = 1.0;

/// Shapes of every network in a learner; stored in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub obs_dim: usize,
    pub state_dim: usize,
    pub n_actions: usize,
    pub n_agents: usize,
    /// Append a one-hot agent index to every agent input.
    pub agent_id: bool,
    pub hidden: usize,
    pub predictor: bool,
    pub critic: bool,
    pub mixer: bool,
}

impl NetConfig {
    /// Observation, previous-action one-hot, optional agent one-hot.
    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_actions + if self.agent_id { self.n_agents } else { 0 }
    }

    /// Writes one agent's trunk input into `row`.
    pub fn fill_input(&self, row: &mut [f64], obs: &[f32], last_action: Option<usize>, agent: usize) {
        row.iter_mut().for_each(|v| *v = 0.0);
        for (d, &o) in row.iter_mut().zip(obs) {
            *d = o as f64;
        }
        if let Some(a) = last_action {
            row[self.obs_dim + a] = 1.0;
        }
        if self.agent_id {
            row[self.obs_dim + self.n_actions + agent] = 1.0;
        }
    }

    /// Parameter names and shapes this configuration implies.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden;
        let mut out = Vec::new();
        let mut lin = |name: &str, i: usize, o: usize| {
            out.push((format!("{name}.w"), vec![i, o]));
            out.push((format!("{name}.b"), vec![o]));
        };
        lin("agent.fc_in", self.input_dim(), h);
        lin("agent.fc", h, h);
        lin("agent.head", h, self.n_actions);
        if self.predictor {
            lin("predictor.fc", h, h);
            lin("predictor.head", h, self.n_actions);
        }
        if self.critic {
            lin("critic.fc1", self.state_dim, h);
            lin("critic.fc2", h, h);
            lin("critic.head", h, 1);
        }
        if self.mixer {
            let s = self.state_dim;
            lin("mixer.hyper_w1.fc", s, HYPER_HIDDEN);
            lin("mixer.hyper_w1.out", HYPER_HIDDEN, self.n_agents * MIXER_EMBED);
            lin("mixer.hyper_b1", s, MIXER_EMBED);
            lin("mixer.hyper_w2.fc", s, HYPER_HIDDEN);
            lin("mixer.hyper_w2.out", HYPER_HIDDEN, MIXER_EMBED);
            lin("mixer.v.fc", s, MIXER_EMBED);
            lin("mixer.v.out", MIXER_EMBED, 1);
        }
        out.push(("agent.gru.w_ih".into(), vec![h, 3 * h]));
        out.push(("agent.gru.b_ih".into(), vec![3 * h]));
        out.push(("agent.gru.w_hh".into(), vec![h, 3 * h]));
        out.push(("agent.gru.b_hh".into(), vec![3 * h]));
        out.sort();
        out
    }

    /// Fresh parameters: orthogonal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet {
        let mut ps = ParameterSet::new();
        for (name, shape) in self.shapes() {
            let t = if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                orthogonal(rng, shape[0], shape[1], gain_for(&name))
            };
            ps.insert(name, t);
        }
        ps
    }

    /// Checks that `params` holds exactly the expected names and shapes.
    pub fn check(&self, params: &ParameterSet) -> Result<()> {
        let expected = self.shapes();
        let got: Vec<(String, Vec<usize>)> = params
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        if got != expected {
            let missing: Vec<_> = expected.iter().filter(|e| !got.contains(e)).map(|e| &e.0).collect();
            let extra: Vec<_> = got.iter().filter(|g| !expected.contains(g)).map(|g| &g.0).collect();
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: missing or reshaped {missing:?}, unexpected {extra:?}"
            )));
        }
        Ok(())
    }
}

fn gain_for(name: &str) -> f64 {
    if name.starts_with("agent.gru") || name.starts_with("mixer.") && name.contains(".out") {
        GAIN_UNIT
    } else if name.ends_with("head.w") {
        GAIN_HEAD
    } else {
        GAIN_HIDDEN
    }
}

/// `rows x cols` matrix with orthonormal rows or columns (whichever is
/// shorter), scaled by `gain`.
pub fn orthogonal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Tensor {
    let (long, short) = (rows.max(cols), rows.min(cols));
    // `short` orthonormal vectors of length `long`, by Gram-Schmidt.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            data[r * cols + c] = gain
                * if rows >= cols {
                    basis[c][r]
                } else {
                    basis[r][c]
                };
        }
    }
    Tensor::matrix(rows, cols, data).expect("shape matches")
}

struct Linear {
    w: Var,
    b: Var,
}

impl Linear {
    fn bind(bound: &Bound, name: &str) -> Result<Self> {
        Ok(Self {
            w: bound.var(&format!("{name}.w"))?,
            b: bound.var(&format!("{name}.b"))?,
        })
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.w, self.b)
    }
}

/// Agent trunk: fc + ReLU, GRU cell, fc + ReLU, head over the unified space.
pub struct Trunk {
    fc_in: Linear,
    w_ih: Var,
    b_ih: Var,
    w_hh: Var,
    b_hh: Var,
    fc: Linear,
    head: Linear,
}

impl Trunk {
    pub fn bind(bound: &Bound) -> Result<Self> {
        Ok(Self {
            fc_in: Linear::bind(bound, "agent.fc_in")?,
            w_ih: bound.var("agent.gru.w_ih")?,
            b_ih: bound.var("agent.gru.b_ih")?,
            w_hh: bound.var("agent.gru.w_hh")?,
            b_hh: bound.var("agent.gru.b_hh")?,
            fc: Linear::bind(bound, "agent.fc")?,
            head: Linear::bind(bound, "agent.head")?,
        })
    }

    /// One recurrent step over a batch of rows: `x` is `[R, input]`, `h_prev`
    /// is `[R, H]`. Returns the `[R, |UAS|]` output and the new hidden state.
    pub fn step(&self, tape: &mut Tape, x: Var, h_prev: Var) -> Result<(Var, Var)> {
        let e = self.fc_in.apply(tape, x)?;
        let e = tape.relu(e)?;
        let h = self.gru(tape, e, h_prev)?;
        let y = self.fc.apply(tape, h)?;
        let y = tape.relu(y)?;
        let out = self.head.apply(tape, y)?;
        Ok((out, h))
    }

    fn gru(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let hd = tape.value(h).cols();
        if tape.value(self.w_hh).shape() != [hd, 3 * hd] {
            return Err(Error::contract("gru", format!("hidden state width {hd}")));
        }
        let gi = tape.linear(x, self.w_ih, self.b_ih)?;
        let gh = tape.linear(h, self.w_hh, self.b_hh)?;
        let (ir, iz, in_) = (
            tape.slice_cols(gi, 0, hd)?,
            tape.slice_cols(gi, hd, hd)?,
            tape.slice_cols(gi, 2 * hd, hd)?,
        );
        let (hr, hz, hn) = (
            tape.slice_cols(gh, 0, hd)?,
            tape.slice_cols(gh, hd, hd)?,
            tape.slice_cols(gh, 2 * hd, hd)?,
        );
        let r = tape.add(ir, hr)?;
        let r = tape.sigmoid(r)?;
        let z = tape.add(iz, hz)?;
        let z = tape.sigmoid(z)?;
        let rn = tape.mul(r, hn)?;
        let n = tape.add(in_, rn)?;
        let n = tape.tanh(n)?;
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let d = tape.sub(h, n)?;
        let zd = tape.mul(z, d)?;
        tape.add(n, zd)
    }

    /// Zero initial hidden state for `rows` rows.
    pub fn initial_hidden(&self, tape: &mut Tape, rows: usize) -> Var {
        let h = tape.value(self.w_hh).shape()[0];
        tape.constant(Tensor::zeros(&[rows, h]))
    }
}

/// Predictor branch ψ: recurrent state → unified-space output.
pub struct Predictor {
    fc: Linear,
    head: Linear,
}

impl Predictor {
    pub fn bind(bound: &Bound) -> Result<Self> {
        Ok(Self {
            fc: Linear::bind(bound, "predictor.fc")?,
            head: Linear::bind(bound, "predictor.head")?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let y = self.fc.apply(tape, h)?;
        let y = tape.relu(y)?;
        self.head.apply(tape, y)
    }
}

/// Centralized state-value critic.
pub struct Critic {
    fc1: Linear,
    fc2: Linear,
    head: Linear,
}

impl Critic {
    pub fn bind(bound: &Bound) -> Result<Self> {
        Ok(Self {
            fc1: Linear::bind(bound, "critic.fc1")?,
            fc2: Linear::bind(bound, "critic.fc2")?,
            head: Linear::bind(bound, "critic.head")?,
        })
    }

    /// `[R, state]` → `[R, 1]`.
    pub fn forward(&self, tape: &mut Tape, s: Var) -> Result<Var> {
        let y = self.fc1.apply(tape, s)?;
        let y = tape.relu(y)?;
        let y = self.fc2.apply(tape, y)?;
        let y = tape.relu(y)?;
        self.head.apply(tape, y)
    }
}

/// Monotonic mixing network with state-conditioned hypernetworks.
pub struct Mixer {
    w1_fc: Linear,
    w1_out: Linear,
    b1: Linear,
    w2_fc: Linear,
    w2_out: Linear,
    v_fc: Linear,
    v_out: Linear,
}

impl Mixer {
    pub fn bind(bound: &Bound) -> Result<Self> {
        Ok(Self {
            w1_fc: Linear::bind(bound, "mixer.hyper_w1.fc")?,
            w1_out: Linear::bind(bound, "mixer.hyper_w1.out")?,
            b1: Linear::bind(bound, "mixer.hyper_b1")?,
            w2_fc: Linear::bind(bound, "mixer.hyper_w2.fc")?,
            w2_out: Linear::bind(bound, "mixer.hyper_w2.out")?,
            v_fc: Linear::bind(bound, "mixer.v.fc")?,
            v_out: Linear::bind(bound, "mixer.v.out")?,
        })
    }

    /// `q` is `[B, n]` chosen per-agent values, `s` is `[B, state]`; returns `[B, 1]`.
    pub fn forward(&self, tape: &mut Tape, q: Var, s: Var) -> Result<Var> {
        let n = tape.value(q).cols();
        let expected = tape.value(self.w1_out.w).cols() / MIXER_EMBED;
        if n != expected || tape.value(q).rows() != tape.value(s).rows() {
            return Err(Error::contract(
                "mixer_forward",
                format!("{n} agent values for a mixer over {expected} agents"),
            ));
        }
        let a = self.w1_fc.apply(tape, s)?;
        let a = tape.relu(a)?;
        let w1 = self.w1_out.apply(tape, a)?;
        let w1 = tape.abs(w1)?;
        let b1 = self.b1.apply(tape, s)?;
        let hidden = tape.row_vec_mat(q, w1, MIXER_EMBED)?;
        let hidden = tape.add(hidden, b1)?;
        let hidden = tape.elu(hidden)?;

        let c = self.w2_fc.apply(tape, s)?;
        let c = tape.relu(c)?;
        let w2 = self.w2_out.apply(tape, c)?;
        let w2 = tape.abs(w2)?;
        let v = self.v_fc.apply(tape, s)?;
        let v = tape.relu(v)?;
        let v = self.v_out.apply(tape, v)?;

        let y = tape.mul(hidden, w2)?;
        let y = tape.sum_cols(y)?;
        tape.add(y, v)
    }
}

/// Frozen copy of the value-side parameters.
#[derive(Clone, Debug)]
pub struct TargetParameters {
    params: ParameterSet,
    since_sync: usize,
}

impl TargetParameters {
    pub fn new(source: &ParameterSet) -> Self {
        Self {
            params: source.clone(),
            since_sync: 0,
        }
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn since_sync(&self) -> usize {
        self.since_sync
    }

    pub fn tick(&mut self) {
        self.since_sync += 1;
    }

    /// Hard copy; names and shapes must match.
    pub fn sync(&mut self, source: &ParameterSet) -> Result<()> {
        self.params.copy_from(source)?;
        self.since_sync = 0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> NetConfig {
        NetConfig {
            obs_dim: 5,
            state_dim: 7,
            n_actions: 6,
            n_agents: 3,
            agent_id: true,
            hidden: 8,
            predictor: true,
            critic: true,
            mixer: true,
        }
    }

    #[test]
    fn orthogonal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = orthogonal(&mut rng, 10, 4, 2.0);
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = (0..10).map(|r| w.data()[r * 4 + i] * w.data()[r * 4 + j]).sum();
                let want = if i == j { 4.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-10);
            }
        }
        let wide = orthogonal(&mut rng, 3, 9, 1.0);
        for i in 0..3 {
            let n: f64 = wide.row(i).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn init_matches_shapes_and_zero_biases() {
        let c = cfg();
        let ps = c.init(&mut ChaCha8Rng::seed_from_u64(1));
        c.check(&ps).unwrap();
        assert!(ps.iter().filter(|(n, _)| n.ends_with(".b") || n.contains(".b_")).all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
        let mut other = c.clone();
        other.n_actions = 7;
        assert!(other.check(&ps).is_err());
    }

    #[test]
    fn input_layout() {
        let c = cfg();
        let mut row = vec![9.0; c.input_dim()];
        c.fill_input(&mut row, &[1.0, 2.0, 3.0, 4.0, 5.0], Some(2), 1);
        assert_eq!(&row[..5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(row[5 + 2], 1.0);
        assert_eq!(row[5 + 6 + 1], 1.0);
        assert_eq!(row.iter().sum::<f64>(), 17.0);
    }

    #[test]
    fn target_sync_is_bit_exact() {
        let c = cfg();
        let a = c.init(&mut ChaCha8Rng::seed_from_u64(1));
        let b = c.init(&mut ChaCha8Rng::seed_from_u64(2));
        let mut tgt = TargetParameters::new(&b);
        tgt.tick();
        assert!(!tgt.params().bit_equal(&a));
        tgt.sync(&a).unwrap();
        assert!(tgt.params().bit_equal(&a));
        assert_eq!(tgt.since_sync(), 0);
        let small = a.subset(&["agent."]);
        assert!(tgt.sync(&small).is_err());
    }
}
