//! User-facing oracle suites with machine-readable reports.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::action_space::{
    mask_policy, ActionClass, AvailableActionMask, GroupSpec, InputKind, LayoutKind, UnifiedActionSpace,
};
use crate::algos::hyper::{AblationFlags, UMappoHyperparameters, UQmixHyperparameters};
use crate::algos::losses::{
    cgi_policy_loss, cgi_value_loss, masked_entropy, masked_log_policy, ppo_actor_loss, td_loss, value_loss,
};
use crate::algos::mappo::UMappo;
use crate::algos::metrics::Instrumentation;
use crate::algos::qmix::UQmix;
use crate::algos::rollout::{run_episode, ActionSelection};
use crate::algos::train::Learner;
use crate::envs::proposition::{brute_force_shared_optimum, uas_deterministic_optimum};
use crate::envs::{EpisodeBatch, Environment, ObsMode, Skirmish, SkirmishConfig};
use crate::error::{Error, Result};
use crate::grad::gradcheck::{check, check_params, compare, sample_coords, GradCheck};
use crate::grad::{ParameterSet, Tape, Tensor, Var};
use crate::nets::{Mixer, NetConfig};

/// Fixtures per gradient check.
pub const GRADCHECK_FIXTURES: usize = 20;
pub const GRADCHECK_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
/// Inputs of non-smooth ops stay at least this far from their kinks.
const KINK_MARGIN: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Proposition,
    Igm,
    Masks,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Gradcheck, Suite::Proposition, Suite::Igm, Suite::Masks];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Proposition => "proposition",
            Suite::Igm => "igm",
            Suite::Masks => "masks",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}` (gradcheck, proposition, igm, masks)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub fixtures: usize,
    /// Where the worst measurement came from, when known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst: Option<String>,
}

impl CheckReport {
    /// Passes when `measured <= tolerance`.
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64, fixtures: usize) -> Self {
        Self {
            name: name.into(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            fixtures,
            worst: None,
        }
    }

    /// Strict bound, `measured < tolerance`.
    pub fn below(name: impl Into<String>, measured: f64, tolerance: f64, fixtures: usize) -> Self {
        Self {
            passed: measured < tolerance,
            ..Self::at_most(name, measured, tolerance, fixtures)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<CheckReport>,
}

impl SuiteReport {
    fn new(suite: Suite, checks: Vec<CheckReport>) -> Self {
        Self {
            suite: suite.to_string(),
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }

    pub fn check(&self, name: &str) -> Option<&CheckReport> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Gradcheck => gradcheck_suite()?,
        Suite::Proposition => proposition_suite()?,
        Suite::Igm => igm_suite()?,
        Suite::Masks => masks_suite()?,
    };
    Ok(SuiteReport::new(suite, checks))
}

// ---------------------------------------------------------------- proposition

pub const PROPOSITION_N: usize = 2;
pub const PROPOSITION_A0: usize = 4;
pub const PROPOSITION_A1: usize = 6;
pub const PROPOSITION_RESOLUTION: usize = 60;
pub const PROPOSITION_TOL: f64 = 1e-3;

fn proposition_suite() -> Result<Vec<CheckReport>> {
    let (n, a0, a1) = (PROPOSITION_N, PROPOSITION_A0, PROPOSITION_A1);
    let bf = brute_force_shared_optimum(n, a0, a1, PROPOSITION_RESOLUTION)?;
    let uas = uas_deterministic_optimum(n, a0, a1, ObsMode::Id)?;
    Ok(vec![
        CheckReport::below("shared_optimum_gap", bf.gap, PROPOSITION_TOL, bf.evaluated as usize),
        CheckReport::at_most("uas_deterministic_reward_gap", (uas - 1.0).abs(), 0.0, 1),
    ])
}

// ------------------------------------------------------------------------ igm

pub const IGM_DRAWS: usize = 100;
const IGM_AGENTS: usize = 3;
const IGM_ACTIONS: usize = 5;

fn mixer_net(n_agents: usize, state_dim: usize) -> NetConfig {
    NetConfig {
        obs_dim: 2,
        state_dim,
        n_actions: 2,
        n_agents,
        agent_id: false,
        hidden: 2,
        predictor: false,
        critic: false,
        mixer: true,
    }
}

fn uniform_params(net: &NetConfig, rng: &mut ChaCha8Rng, scale: f64) -> ParameterSet {
    let mut ps = net.init(rng);
    let names: Vec<String> = ps.names().cloned().collect();
    for n in names {
        for v in ps.get_mut(&n).expect("own name").data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
    ps
}

fn first_argmax(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |b, i| if xs[i] > xs[b] { i } else { b })
}

fn igm_suite() -> Result<Vec<CheckReport>> {
    let net = mixer_net(IGM_AGENTS, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0x16d);
    let joint = IGM_ACTIONS.pow(IGM_AGENTS as u32);
    let mut mismatches = 0;
    for _ in 0..IGM_DRAWS {
        let ps = uniform_params(&net, &mut rng, 1.0);
        let s: Vec<f64> = (0..net.state_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qs: Vec<Vec<f64>> = (0..IGM_AGENTS)
            .map(|_| (0..IGM_ACTIONS).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let mut rows = Vec::with_capacity(joint * IGM_AGENTS);
        let mut joints = Vec::with_capacity(joint);
        for k in 0..joint {
            let mut rest = k;
            let mut a = Vec::with_capacity(IGM_AGENTS);
            for q in &qs {
                a.push(rest % IGM_ACTIONS);
                rows.push(q[rest % IGM_ACTIONS]);
                rest /= IGM_ACTIONS;
            }
            joints.push(a);
        }
        let mut tape = Tape::new();
        let b = tape.bind_frozen(&ps);
        let qv = tape.constant(Tensor::matrix(joint, IGM_AGENTS, rows)?);
        let sv = tape.constant(Tensor::matrix(joint, net.state_dim, s.repeat(joint))?);
        let tot = Mixer::bind(&b)?.forward(&mut tape, qv, sv)?;
        let best = first_argmax(tape.value(tot).data());
        let individual: Vec<usize> = qs.iter().map(|q| first_argmax(q)).collect();
        mismatches += (joints[best] != individual) as usize;
    }
    Ok(vec![CheckReport::at_most("joint_argmax_mismatches", mismatches as f64, 0.0, IGM_DRAWS)])
}

// ---------------------------------------------------------------------- masks

pub const MASK_INSTANCES: usize = 1000;
pub const MASK_SAMPLES: usize = 10_000;

fn random_mask(rng: &mut ChaCha8Rng, len: usize) -> AvailableActionMask {
    let mut bits: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.5)).collect();
    bits[rng.gen_range(0..len)] = true;
    AvailableActionMask::new(bits)
}

fn random_space(rng: &mut ChaCha8Rng) -> Result<UnifiedActionSpace> {
    let n_groups = rng.gen_range(2..4);
    let groups: Vec<GroupSpec> = (0..n_groups)
        .map(|g| {
            let mut caps = Vec::new();
            if rng.gen_bool(0.5) {
                caps.push(ActionClass::AllyAct);
            }
            if rng.gen_bool(0.5) {
                caps.push(ActionClass::EnemyAct);
            }
            GroupSpec::new(g, &caps, vec![g])
        })
        .collect();
    UnifiedActionSpace::build(&groups, rng.gen_range(1..4), rng.gen_range(1..5), LayoutKind::Unified)
}

fn masks_suite() -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3a5c);
    let (mut sum_err, mut leaked, mut idem, mut cross) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut illegal = 0usize;
    let per_instance = MASK_SAMPLES / MASK_INSTANCES;
    for _ in 0..MASK_INSTANCES {
        let len = rng.gen_range(2..17);
        let mask = random_mask(&mut rng, len);
        let logits: Vec<f64> = (0..len).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let mut dist: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        dist[mask.indices()[0]] += 0.1;
        for (values, kind) in [(&logits, InputKind::Logits), (&dist, InputKind::Distribution)] {
            let p = mask_policy(values, &mask, kind)?;
            sum_err = sum_err.max((p.probs.iter().sum::<f64>() - 1.0).abs());
            for (q, &m) in p.probs.iter().zip(mask.bits()) {
                if !m {
                    leaked = leaked.max(q.abs());
                }
            }
            let again = mask_policy(&p.probs, &mask, InputKind::Distribution)?;
            for (a, b) in p.probs.iter().zip(&again.probs) {
                idem = idem.max((a - b).abs());
            }
            for _ in 0..per_instance / 2 {
                illegal += !mask.get(p.sample(&mut rng)) as usize;
            }
        }

        // Moving outputs outside one group's static mask leaves its policy
        // bit-identical.
        let uas = random_space(&mut rng)?;
        let g = rng.gen_range(0..uas.groups().len());
        let own = uas.static_mask(g);
        if own.any() {
            let base: Vec<f64> = (0..uas.size()).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let mut moved = base.clone();
            for (i, v) in moved.iter_mut().enumerate() {
                if !own.get(i) {
                    *v += rng.gen_range(-50.0..50.0);
                }
            }
            let a = mask_policy(&base, own, InputKind::Logits)?;
            let b = mask_policy(&moved, own, InputKind::Logits)?;
            for (x, y) in a.probs.iter().zip(&b.probs) {
                cross = cross.max((x - y).abs());
            }
        }
    }
    Ok(vec![
        CheckReport::at_most("renormalization", sum_err, 1e-9, MASK_INSTANCES),
        CheckReport::at_most("unavailable_mass", leaked, 0.0, MASK_INSTANCES),
        CheckReport::at_most("idempotence", idem, 1e-12, MASK_INSTANCES),
        CheckReport::at_most("cross_group_independence", cross, 0.0, MASK_INSTANCES),
        CheckReport::at_most("illegal_samples", illegal as f64, 0.0, MASK_SAMPLES),
    ])
}

// ------------------------------------------------------------------ gradcheck

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;
type MakeFn = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized")
}

/// Uniform entries at least `KINK_MARGIN` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, r: usize, c: usize, kinks: &[f64]) -> Tensor {
    let data = (0..r * c)
        .map(|_| loop {
            let v = rng.gen_range(-2.0..2.0);
            if kinks.iter().all(|k| (v - k).abs() >= KINK_MARGIN) {
                break v;
            }
        })
        .collect();
    Tensor::matrix(r, c, data).expect("sized")
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..6))
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
fn reduce(tape: &mut Tape, v: Var) -> Result<Var> {
    let t = tape.value(v);
    let shape = t.shape().to_vec();
    let w: Vec<f64> = (0..t.len()).map(|i| 0.3 + 0.17 * i as f64).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

fn op_table() -> Vec<(&'static str, OpFn, MakeFn)> {
    fn one(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let (r, c) = dims(rng);
        vec![uniform(rng, r, c, -2.0, 2.0)]
    }
    fn positive(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let (r, c) = dims(rng);
        vec![uniform(rng, r, c, 0.2, 3.0)]
    }
    fn off_zero(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let (r, c) = dims(rng);
        vec![away_from(rng, r, c, &[0.0])]
    }
    fn off_clip(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let (r, c) = dims(rng);
        vec![away_from(rng, r, c, &[-0.5, 0.7])]
    }
    fn two(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let (r, c) = dims(rng);
        vec![uniform(rng, r, c, -2.0, 2.0), uniform(rng, r, c, -2.0, 2.0)]
    }
    fn two_apart(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let (r, c) = dims(rng);
        let a = uniform(rng, r, c, -2.0, 2.0);
        let gap = away_from(rng, r, c, &[0.0]);
        let b: Vec<f64> = a.data().iter().zip(gap.data()).map(|(x, d)| x + d).collect();
        vec![a, Tensor::matrix(r, c, b).expect("sized")]
    }
    fn matmul_in(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let (m, k) = dims(rng);
        let n = rng.gen_range(1..5);
        vec![uniform(rng, m, k, -1.0, 1.0), uniform(rng, k, n, -1.0, 1.0)]
    }
    fn row_in(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let (r, c) = dims(rng);
        vec![uniform(rng, r, c, -1.0, 1.0), uniform(rng, 1, c, -1.0, 1.0)]
    }
    fn col_in(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let (r, c) = dims(rng);
        vec![uniform(rng, r, c, -1.0, 1.0), uniform(rng, r, 1, -1.0, 1.0)]
    }
    fn cols_in(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let r = rng.gen_range(1..4);
        vec![uniform(rng, r, 2, -1.0, 1.0), uniform(rng, r, 3, -1.0, 1.0)]
    }
    fn rows_in(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let c = rng.gen_range(1..4);
        vec![uniform(rng, 2, c, -1.0, 1.0), uniform(rng, 3, c, -1.0, 1.0)]
    }
    fn rvm_in(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let b = rng.gen_range(1..4);
        let n = rng.gen_range(1..4);
        vec![uniform(rng, b, n, -1.0, 1.0), uniform(rng, b, n * 3, -1.0, 1.0)]
    }
    fn linear_in(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let (r, k) = dims(rng);
        let n = rng.gen_range(1..5);
        vec![uniform(rng, r, k, -1.0, 1.0), uniform(rng, k, n, -1.0, 1.0), uniform(rng, 1, n, -1.0, 1.0)]
    }
    vec![
        ("exp", |t, v| { let y = t.exp(v[0])?; reduce(t, y) }, one),
        ("log", |t, v| { let y = t.log(v[0])?; reduce(t, y) }, positive),
        ("tanh", |t, v| { let y = t.tanh(v[0])?; reduce(t, y) }, one),
        ("sigmoid", |t, v| { let y = t.sigmoid(v[0])?; reduce(t, y) }, one),
        ("relu", |t, v| { let y = t.relu(v[0])?; reduce(t, y) }, off_zero),
        ("elu", |t, v| { let y = t.elu(v[0])?; reduce(t, y) }, off_zero),
        ("abs", |t, v| { let y = t.abs(v[0])?; reduce(t, y) }, off_zero),
        ("square", |t, v| { let y = t.square(v[0])?; reduce(t, y) }, one),
        ("neg", |t, v| { let y = t.neg(v[0])?; reduce(t, y) }, one),
        ("scale", |t, v| { let y = t.scale(v[0], -1.7)?; reduce(t, y) }, one),
        ("add_scalar", |t, v| { let y = t.add_scalar(v[0], 0.4)?; reduce(t, y) }, one),
        ("clip", |t, v| { let y = t.clip(v[0], -0.5, 0.7)?; reduce(t, y) }, off_clip),
        ("softmax", |t, v| { let y = t.softmax(v[0])?; reduce(t, y) }, one),
        ("log_softmax", |t, v| { let y = t.log_softmax(v[0])?; reduce(t, y) }, one),
        ("mean", |t, v| t.mean(v[0]), one),
        ("sum", |t, v| t.sum(v[0]), one),
        ("sum_cols", |t, v| { let y = t.sum_cols(v[0])?; reduce(t, y) }, one),
        ("reshape", |t, v| { let n = t.value(v[0]).len(); let y = t.reshape(v[0], &[n])?; reduce(t, y) }, one),
        ("gather", |t, v| {
            let (rows, cols) = (t.value(v[0]).rows(), t.value(v[0]).cols());
            let idx: Vec<usize> = (0..rows).map(|r| (r * 7 + 3) % cols).collect();
            let y = t.gather(v[0], &idx)?;
            reduce(t, y)
        }, one),
        ("masked_fill", |t, v| {
            let n = t.value(v[0]).len();
            let keep: Vec<bool> = (0..n).map(|i| i % 3 != 1).collect();
            let y = t.masked_fill(v[0], &keep, -3.0)?;
            reduce(t, y)
        }, one),
        ("slice_cols", |t, v| {
            let c = t.value(v[0]).cols();
            let y = t.slice_cols(v[0], c / 2, c - c / 2)?;
            reduce(t, y)
        }, one),
        ("add", |t, v| { let y = t.add(v[0], v[1])?; reduce(t, y) }, two),
        ("sub", |t, v| { let y = t.sub(v[0], v[1])?; reduce(t, y) }, two),
        ("mul", |t, v| { let y = t.mul(v[0], v[1])?; reduce(t, y) }, two),
        ("maximum", |t, v| { let y = t.maximum(v[0], v[1])?; reduce(t, y) }, two_apart),
        ("minimum", |t, v| { let y = t.minimum(v[0], v[1])?; reduce(t, y) }, two_apart),
        ("matmul", |t, v| { let y = t.matmul(v[0], v[1])?; reduce(t, y) }, matmul_in),
        ("add_row", |t, v| { let y = t.add_row(v[0], v[1])?; reduce(t, y) }, row_in),
        ("mul_col", |t, v| { let y = t.mul_col(v[0], v[1])?; reduce(t, y) }, col_in),
        ("concat_cols", |t, v| { let y = t.concat_cols(&[v[0], v[1], v[0]])?; reduce(t, y) }, cols_in),
        ("concat_rows", |t, v| { let y = t.concat_rows(&[v[0], v[1], v[0]])?; reduce(t, y) }, rows_in),
        ("row_vec_mat", |t, v| { let y = t.row_vec_mat(v[0], v[1], 3)?; reduce(t, y) }, rvm_in),
        ("linear", |t, v| { let y = t.linear(v[0], v[1], v[2])?; reduce(t, y) }, linear_in),
    ]
}

fn worst_of(name: &str, results: impl IntoIterator<Item = Result<GradCheck>>) -> Result<CheckReport> {
    worst_named(name, results.into_iter().map(|r| r.map(|g| (g, String::new()))))
}

/// Worst relative error over fixtures, remembering the fixture index and
/// the tensor it came from.
fn worst_named(
    name: &str,
    results: impl IntoIterator<Item = Result<(GradCheck, String)>>,
) -> Result<CheckReport> {
    let mut worst = (0.0f64, None);
    let mut n = 0;
    for r in results {
        let (g, at) = r?;
        if n == 0 || g.max_rel_err > worst.0 {
            let at = if at.is_empty() { format!("fixture {n}") } else { format!("fixture {n}, {at}") };
            worst = (g.max_rel_err, Some(at));
        }
        n += 1;
    }
    Ok(CheckReport {
        worst: worst.1,
        ..CheckReport::below(name, worst.0, GRADCHECK_TOL, n)
    })
}

/// Every tape op and every composed loss against central differences.
pub fn gradcheck_suite() -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for (i, (name, f, make)) in op_table().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        out.push(worst_of(
            &format!("op:{name}"),
            (0..GRADCHECK_FIXTURES).map(|_| check(f, &make(&mut rng), FD_STEP)),
        )?);
    }
    out.push(worst_of("loss:cgi_policy", loss_fixtures(0, cgi_policy_fixture))?);
    out.push(worst_of("loss:cgi_value", loss_fixtures(1, cgi_value_fixture))?);
    out.push(worst_of("loss:ppo_actor", loss_fixtures(2, ppo_actor_fixture))?);
    out.push(worst_of("loss:value", loss_fixtures(3, value_fixture))?);
    out.push(worst_named("loss:td_through_mixer", (0..GRADCHECK_FIXTURES).map(td_mixer_fixture))?);
    out.push(worst_named("loss:umappo_total", (0..GRADCHECK_FIXTURES).map(umappo_fixture))?);
    out.push(worst_named("loss:uqmix_total", (0..GRADCHECK_FIXTURES).map(uqmix_fixture))?);
    Ok(out)
}

fn loss_fixtures(
    stream: u64,
    fixture: fn(&mut ChaCha8Rng) -> Result<GradCheck>,
) -> impl Iterator<Item = Result<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + stream);
    (0..GRADCHECK_FIXTURES).map(move |_| fixture(&mut rng))
}

fn keep_mask(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<bool> {
    (0..r)
        .flat_map(|_| random_mask(rng, c).bits().to_vec())
        .collect()
}

fn cgi_policy_fixture(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (r, c) = (rng.gen_range(1..6), rng.gen_range(2..8));
    let keep = keep_mask(rng, r, c);
    let target: Vec<f64> = (0..r * c).map(|_| rng.gen_range(0.0..1.0)).collect();
    let x = uniform(rng, r, c, -2.0, 2.0);
    check(move |t, v| cgi_policy_loss(t, v[0], &target, &keep), &[x], FD_STEP)
}

fn cgi_value_fixture(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (r, c) = (rng.gen_range(1..6), rng.gen_range(2..8));
    let keep = keep_mask(rng, r, c);
    let target: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let x = uniform(rng, r, c, -3.0, 3.0);
    check(move |t, v| cgi_value_loss(t, v[0], &target, &keep), &[x], FD_STEP)
}

fn ppo_actor_fixture(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let eps = 0.2;
    let (r, c) = (rng.gen_range(1..6), rng.gen_range(2..8));
    let keep = keep_mask(rng, r, c);
    let actions: Vec<usize> = (0..r)
        .map(|i| {
            let avail: Vec<usize> = (0..c).filter(|&j| keep[i * c + j]).collect();
            avail[rng.gen_range(0..avail.len())]
        })
        .collect();
    let logits = uniform(rng, r, c, -2.0, 2.0);
    let new_logp: Vec<f64> = (0..r)
        .map(|i| {
            let p = mask_policy(logits.row(i), &AvailableActionMask::new(keep[i * c..(i + 1) * c].to_vec()), InputKind::Logits)
                .expect("non-empty mask");
            p.probs[actions[i]].ln()
        })
        .collect();
    // Old log-probabilities put each ratio clearly inside or outside the
    // clip range, away from its kinks.
    let old_logp: Vec<f64> = new_logp
        .iter()
        .map(|&l| {
            let ratio = *[0.5, 0.9, 1.05, 1.5].get(rng.gen_range(0..4)).expect("index in range");
            l - f64::ln(ratio)
        })
        .collect();
    let adv: Vec<f64> = (0..r).map(|_| away_from(rng, 1, 1, &[0.0]).item()).collect();
    let w: Vec<f64> = (0..r).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect();
    check(
        move |t, v| {
            let lp = masked_log_policy(t, v[0], &keep)?;
            let ent = masked_entropy(t, lp, &keep)?;
            let chosen = t.gather(lp, &actions)?;
            ppo_actor_loss(t, chosen, &old_logp, &adv, ent, &w, eps, 0.01)
        },
        &[logits],
        FD_STEP,
    )
}

fn value_fixture(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let eps = 0.2;
    let r = rng.gen_range(1..8);
    let v_old: Vec<f64> = (0..r).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let returns: Vec<f64> = (0..r).map(|_| rng.gen_range(-2.0..2.0)).collect();
    // New values sit clearly inside or outside the clip band, and away from
    // the point where the clipped and unclipped errors are equal.
    let v_new: Vec<f64> = v_old
        .iter()
        .zip(&returns)
        .map(|(&o, &ret)| loop {
            let v = o + rng.gen_range(-0.6..0.6);
            let clipped = v.clamp(o - eps, o + eps);
            let near_band = ((v - o).abs() - eps).abs() < KINK_MARGIN;
            let near_tie = ((v - ret).powi(2) - (clipped - ret).powi(2)).abs() < KINK_MARGIN;
            if !near_band && !near_tie {
                break v;
            }
        })
        .collect();
    let w: Vec<f64> = (0..r).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect();
    check(
        move |t, v| value_loss(t, v[0], &v_old, &returns, &w, eps),
        &[Tensor::from_column(&v_new)],
        FD_STEP,
    )
}

fn td_mixer_fixture(k: usize) -> Result<(GradCheck, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3000 + k as u64);
    let net = mixer_net(3, 4);
    let ps = uniform_params(&net, &mut rng, 0.5).subset(&["mixer."]);
    let b = rng.gen_range(2..6);
    let q = uniform(&mut rng, b, 3, -2.0, 2.0);
    let s = uniform(&mut rng, b, net.state_dim, -1.0, 1.0);
    let y: Vec<f64> = (0..b).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let w: Vec<f64> = (0..b).map(|i| if i == 0 || rng.gen_bool(0.7) { 1.0 } else { 0.0 }).collect();
    let f = |tape: &mut Tape, bound: &crate::grad::Bound| {
        let qv = tape.constant(q.clone());
        let sv = tape.constant(s.clone());
        let tot = Mixer::bind(bound)?.forward(tape, qv, sv)?;
        td_loss(tape, tot, &y, &w)
    };
    check_params(f, &ps, None, FD_STEP)
}

fn small_skirmish() -> Result<Skirmish> {
    Skirmish::new(
        SkirmishConfig {
            width: 8,
            height: 8,
            n_attackers: 2,
            n_healers: 1,
            n_enemies: 2,
            episode_limit: 10,
        },
        LayoutKind::Unified,
    )
}

fn collect(
    env: &mut dyn Environment,
    learner: &dyn Learner,
    selection: ActionSelection,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpisodeBatch>> {
    let mut counters = Instrumentation::default();
    (0..k)
        .map(|_| {
            let seed = rng.gen();
            run_episode(env, learner.net(), learner.params(), seed, learner.output_kind(), selection, rng, &mut counters)
        })
        .collect()
}

fn jitter(params: &ParameterSet, rng: &mut ChaCha8Rng, scale: f64) -> ParameterSet {
    let mut p = params.clone();
    let names: Vec<String> = p.names().cloned().collect();
    for n in names {
        for v in p.get_mut(&n).expect("own name").data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
    p
}

/// Coordinates per tensor in the trainer-level checks. Detached
/// quantities (behaviour statistics, TD targets, inverse targets) are held
/// at their values for the unperturbed parameters.
const TRAINER_COORDS: usize = 4;
/// Trainer losses sum thousands of terms; a larger step keeps roundoff
/// below the tolerance.
const TRAINER_FD_STEP: f64 = 1e-4;

fn umappo_fixture(k: usize) -> Result<(GradCheck, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4000 + k as u64);
    let mut env = small_skirmish()?;
    let mut m = UMappo::new(&env, UMappoHyperparameters::default(), AblationFlags::FULL, false, k as u64)?;
    let eps = collect(&mut env, &m, ActionSelection::Sample, 3, &mut rng)?;
    let fx = m.prepare(&eps)?;
    // Step away from the behaviour parameters so ratios differ from one.
    let params = jitter(m.params(), &mut rng, 0.02);
    m.set_params(params.clone())?;
    let mut g = m.loss_graph(&fx)?;
    let grads = g.gradients(f64::INFINITY)?;
    let pinned = g.inverse.take();
    let coords = sample_coords(&params, &[""], TRAINER_COORDS, &mut rng);
    let eval = |p: &ParameterSet| -> Result<f64> {
        m.set_params(p.clone())?;
        let g = m.loss_graph_pinned(&fx, pinned.as_ref())?;
        Ok(g.value(g.total))
    };
    compare(&grads, &params, Some(&coords), eval, TRAINER_FD_STEP)
}

fn uqmix_fixture(k: usize) -> Result<(GradCheck, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5000 + k as u64);
    let mut env = small_skirmish()?;
    let mut q = UQmix::new(&env, UQmixHyperparameters::default(), AblationFlags::FULL, false, k as u64)?;
    let eps = collect(&mut env, &q, ActionSelection::EpsilonGreedy(0.5), 3, &mut rng)?;
    let refs: Vec<&EpisodeBatch> = eps.iter().collect();
    // Online parameters move; the target network stays put.
    let params = jitter(q.params(), &mut rng, 0.02);
    q.replace_online(params.clone())?;
    let mut g = q.loss_graph(&refs)?;
    let grads = g.gradients(f64::INFINITY)?;
    let pinned = g.inverse.take();
    let coords = sample_coords(&params, &[""], TRAINER_COORDS, &mut rng);
    let eval = |p: &ParameterSet| -> Result<f64> {
        q.replace_online(p.clone())?;
        let g = q.loss_graph_pinned(&refs, pinned.as_ref())?;
        Ok(g.value(g.total))
    };
    compare(&grads, &params, Some(&coords), eval, TRAINER_FD_STEP)
}
