//! Finite-difference oracle over named parameter sets.
#![allow(dead_code)]

use uas_core::grad::{Bound, ParameterSet, Tape, Var};
use uas_core::Result;

pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

/// Evaluates `f` with every parameter frozen (no backward involved).
pub fn eval<F>(f: &F, params: &ParameterSet) -> f64
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind_frozen(params);
    let out = f(&mut tape, &bound).unwrap();
    tape.value(out).item()
}

/// Largest per-tensor relative error between tape gradients and central
/// differences, over tensors whose name starts with one of `prefixes`.
pub fn param_gradcheck<F>(f: &F, params: &ParameterSet, prefixes: &[&str], h: f64) -> (f64, String)
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let out = f(&mut tape, &bound).unwrap();
    tape.backward(out).unwrap();
    let grads = tape.gradients(&bound);

    let mut worst = (0.0, String::new());
    let mut p = params.clone();
    let names: Vec<String> = params
        .names()
        .filter(|n| prefixes.iter().any(|pre| n.starts_with(pre)))
        .cloned()
        .collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        let mut numeric = vec![0.0; len];
        for j in 0..len {
            let orig = p.get(&name).unwrap().data()[j];
            p.get_mut(&name).unwrap().data_mut()[j] = orig + h;
            let up = eval(f, &p);
            p.get_mut(&name).unwrap().data_mut()[j] = orig - h;
            let down = eval(f, &p);
            p.get_mut(&name).unwrap().data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let e = rel_err(grads.get(&name).unwrap().data(), &numeric);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    worst
}

/// Like [`param_gradcheck`] but compares only `per_tensor` randomly chosen
/// coordinates of each tensor (all of them when the tensor is smaller).
pub fn sampled_param_gradcheck<F, R>(
    f: &F,
    params: &ParameterSet,
    prefixes: &[&str],
    h: f64,
    per_tensor: usize,
    rng: &mut R,
) -> (f64, String)
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
    R: rand::Rng,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let out = f(&mut tape, &bound).unwrap();
    tape.backward(out).unwrap();
    let grads = tape.gradients(&bound);

    let mut worst = (0.0, String::new());
    let mut p = params.clone();
    let names: Vec<String> = params
        .names()
        .filter(|n| prefixes.iter().any(|pre| n.starts_with(pre)))
        .cloned()
        .collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        let coords: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            rand::seq::index::sample(rng, len, per_tensor).into_vec()
        };
        let analytic: Vec<f64> = coords.iter().map(|&j| grads.get(&name).unwrap().data()[j]).collect();
        let numeric: Vec<f64> = coords
            .iter()
            .map(|&j| {
                let orig = p.get(&name).unwrap().data()[j];
                p.get_mut(&name).unwrap().data_mut()[j] = orig + h;
                let up = eval(f, &p);
                p.get_mut(&name).unwrap().data_mut()[j] = orig - h;
                let down = eval(f, &p);
                p.get_mut(&name).unwrap().data_mut()[j] = orig;
                (up - down) / (2.0 * h)
            })
            .collect();
        let e = rel_err(&analytic, &numeric);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    worst
}
