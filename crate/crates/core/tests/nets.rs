mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uas_core::action_space::{
    mask_policy, ActionClass, GroupSpec, InputKind, LayoutKind, UnifiedActionSpace,
};
use uas_core::grad::{ParameterSet, Tape, Tensor};
use uas_core::nets::{Critic, Mixer, NetConfig, Predictor, Trunk};

fn cfg() -> NetConfig {
    NetConfig {
        obs_dim: 4,
        state_dim: 5,
        n_actions: 6,
        n_agents: 3,
        agent_id: false,
        hidden: 6,
        predictor: true,
        critic: true,
        mixer: true,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Parameters with every entry drawn uniformly, biases included.
fn random_params(c: &NetConfig, rng: &mut ChaCha8Rng, scale: f64) -> ParameterSet {
    let mut ps = c.init(rng);
    let names: Vec<String> = ps.names().cloned().collect();
    for n in names {
        for v in ps.get_mut(&n).unwrap().data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
    ps
}

fn zero_params(c: &NetConfig) -> ParameterSet {
    let mut ps = c.init(&mut ChaCha8Rng::seed_from_u64(0));
    let names: Vec<String> = ps.names().cloned().collect();
    for n in names {
        ps.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    ps
}

#[test]
fn zero_parameters_give_zero_outputs_and_state() {
    let c = cfg();
    let ps = zero_params(&c);
    let mut tape = Tape::new();
    let b = tape.bind_frozen(&ps);
    let trunk = Trunk::bind(&b).unwrap();
    let x = tape.constant(Tensor::zeros(&[2, c.input_dim()]));
    let h0 = trunk.initial_hidden(&mut tape, 2);
    let (out, h1) = trunk.step(&mut tape, x, h0).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(h1).data().iter().all(|&v| v == 0.0));
    let pred = Predictor::bind(&b).unwrap().forward(&mut tape, h1).unwrap();
    assert!(tape.value(pred).data().iter().all(|&v| v == 0.0));
}

#[test]
fn trunk_is_deterministic_and_shared_across_agents() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ps = random_params(&c, &mut rng, 0.5);
    let x = rand_tensor(&mut rng, 3, c.input_dim());
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let b = tape.bind_frozen(&ps);
        let trunk = Trunk::bind(&b).unwrap();
        let xv = tape.constant(x.clone());
        let h0 = trunk.initial_hidden(&mut tape, 3);
        let (out, _) = trunk.step(&mut tape, xv, h0).unwrap();
        tape.value(out).clone()
    };
    let a = run(&x);
    assert_eq!(a, run(&x));
    // Swap agents 0 and 2: outputs swap, bit for bit.
    let mut swapped = x.clone();
    let w = c.input_dim();
    let (r0, r2) = (x.row(0).to_vec(), x.row(2).to_vec());
    swapped.data_mut()[..w].copy_from_slice(&r2);
    swapped.data_mut()[2 * w..].copy_from_slice(&r0);
    let b = run(&swapped);
    assert_eq!(a.row(0), b.row(2));
    assert_eq!(a.row(2), b.row(0));
    assert_eq!(a.row(1), b.row(1));
}

#[test]
fn stepwise_unroll_matches_single_pass() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ps = c.init(&mut rng);
    let xs: Vec<Tensor> = (0..6).map(|_| rand_tensor(&mut rng, 2, c.input_dim())).collect();

    // One tape for the whole sequence.
    let mut tape = Tape::new();
    let b = tape.bind(&ps);
    let trunk = Trunk::bind(&b).unwrap();
    let mut h = trunk.initial_hidden(&mut tape, 2);
    let mut single = Vec::new();
    for x in &xs {
        let xv = tape.constant(x.clone());
        let (_, hn) = trunk.step(&mut tape, xv, h).unwrap();
        single.push(tape.value(hn).clone());
        h = hn;
    }

    // A fresh tape per step, carrying h across as a plain tensor.
    let mut carried = Tensor::zeros(&[2, c.hidden]);
    for (t, x) in xs.iter().enumerate() {
        let mut tape = Tape::new();
        let b = tape.bind_frozen(&ps);
        let trunk = Trunk::bind(&b).unwrap();
        let xv = tape.constant(x.clone());
        let hv = tape.constant(carried.clone());
        let (_, hn) = trunk.step(&mut tape, xv, hv).unwrap();
        carried = tape.value(hn).clone();
        assert_eq!(carried, single[t]);
    }
}

#[test]
fn trunk_and_predictor_gradients_match_finite_differences() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..3 {
        let ps = random_params(&c, &mut rng, 0.6);
        let xs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, 2, c.input_dim())).collect();
        let f = |tape: &mut Tape, b: &uas_core::grad::Bound| {
            let trunk = Trunk::bind(b)?;
            let pred = Predictor::bind(b)?;
            let mut h = trunk.initial_hidden(tape, 2);
            let mut outs = Vec::new();
            for x in &xs {
                let xv = tape.constant(x.clone());
                let (o, hn) = trunk.step(tape, xv, h)?;
                let p = pred.forward(tape, hn)?;
                outs.push(o);
                outs.push(p);
                h = hn;
            }
            let all = tape.concat_cols(&outs)?;
            tape.mean(all)
        };
        let (err, name) = common::param_gradcheck(&f, &ps, &["agent.", "predictor."], 1e-5);
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn predicted_inverse_policy_respects_the_other_mask() {
    let groups = [
        GroupSpec::new(0, &[ActionClass::EnemyAct], vec![0, 1]),
        GroupSpec::new(1, &[ActionClass::AllyAct], vec![2]),
    ];
    let uas = UnifiedActionSpace::build(&groups, 2, 3, LayoutKind::Unified).unwrap();
    let c = NetConfig { n_actions: uas.size(), ..cfg() };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ps = random_params(&c, &mut rng, 0.5);
    let mut tape = Tape::new();
    let b = tape.bind_frozen(&ps);
    let h = tape.constant(rand_tensor(&mut rng, 1, c.hidden));
    let pred = Predictor::bind(&b).unwrap().forward(&mut tape, h).unwrap();
    let (_, medivac_mask) = uas.inverse_masks(0)[0];
    let p = mask_policy(tape.value(pred).data(), medivac_mask, InputKind::Logits).unwrap();
    assert!(p.probs[8..11].iter().all(|&v| v == 0.0));
}

#[test]
fn critic_and_mixer_gradients_match_finite_differences() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..3 {
        let ps = random_params(&c, &mut rng, 0.6);
        let s = rand_tensor(&mut rng, 4, c.state_dim);
        let q = rand_tensor(&mut rng, 4, c.n_agents);
        let f = |tape: &mut Tape, b: &uas_core::grad::Bound| {
            let sv = tape.constant(s.clone());
            let qv = tape.constant(q.clone());
            let v = Critic::bind(b)?.forward(tape, sv)?;
            let m = Mixer::bind(b)?.forward(tape, qv, sv)?;
            let both = tape.concat_cols(&[v, m])?;
            let sq = tape.square(both)?;
            tape.mean(sq)
        };
        let (err, name) = common::param_gradcheck(&f, &ps, &["critic.", "mixer."], 1e-5);
        assert!(err < 1e-4, "{name}: {err}");
    }
}

fn q_tot(ps: &ParameterSet, q: &Tensor, s: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let b = tape.bind_frozen(ps);
    let qv = tape.constant(q.clone());
    let sv = tape.constant(s.clone());
    let out = Mixer::bind(&b).unwrap().forward(&mut tape, qv, sv).unwrap();
    tape.value(out).data().to_vec()
}

#[test]
fn additive_special_case() {
    // Mixing weights that route every agent into one hidden unit with weight
    // one, and one unit of output weight, reduce the mixer to a plain sum for
    // non-negative inputs.
    let c = cfg();
    let mut ps = zero_params(&c);
    let b1 = ps.get_mut("mixer.hyper_w1.out.b").unwrap().data_mut();
    for i in 0..c.n_agents {
        b1[i * 32] = 1.0;
    }
    ps.get_mut("mixer.hyper_w2.out.b").unwrap().data_mut()[0] = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let q = Tensor::matrix(1, 3, (0..3).map(|_| rng.gen_range(0.0..5.0)).collect()).unwrap();
        let s = rand_tensor(&mut rng, 1, c.state_dim);
        let sum: f64 = q.data().iter().sum();
        assert!((q_tot(&ps, &q, &s)[0] - sum).abs() < 1e-12);
    }
}

#[test]
fn mixer_is_monotone_in_every_agent_value() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let ps = random_params(&c, &mut rng, 1.0);
        let s = rand_tensor(&mut rng, 1, c.state_dim);
        let q = rand_tensor(&mut rng, 1, c.n_agents);
        let i = rng.gen_range(0..c.n_agents);
        let mut bumped = q.clone();
        bumped.data_mut()[i] += 0.1;
        assert!(q_tot(&ps, &bumped, &s)[0] >= q_tot(&ps, &q, &s)[0]);
    }
}

#[test]
fn joint_argmax_equals_individual_argmaxes() {
    let c = cfg();
    let n_act = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut matches = 0;
    for _ in 0..100 {
        let ps = random_params(&c, &mut rng, 1.0);
        let s = rand_tensor(&mut rng, 1, c.state_dim);
        let qs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n_act).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        // All 125 joint actions in one batch.
        let mut rows = Vec::new();
        let mut joints = Vec::new();
        for a in 0..n_act {
            for b in 0..n_act {
                for d in 0..n_act {
                    rows.extend([qs[0][a], qs[1][b], qs[2][d]]);
                    joints.push([a, b, d]);
                }
            }
        }
        let q = Tensor::matrix(125, 3, rows).unwrap();
        let states = Tensor::matrix(125, c.state_dim, s.data().repeat(125)).unwrap();
        let tot = q_tot(&ps, &q, &states);
        let best = (0..125).fold(0, |bi, i| if tot[i] > tot[bi] { i } else { bi });
        let individual: Vec<usize> = qs
            .iter()
            .map(|q| (0..n_act).fold(0, |bi, i| if q[i] > q[bi] { i } else { bi }))
            .collect();
        matches += (joints[best].to_vec() == individual) as usize;
    }
    assert_eq!(matches, 100);
}
