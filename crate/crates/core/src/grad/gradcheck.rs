//! Finite-difference gradient checking.
//!
//! Derivatives are estimated from central differences at steps `h` and
//! `h/2`. When the two agree the Richardson combination is used; when they
//! disagree a kink (ReLU, abs, clip, max) lies within the step, and the
//! one-sided estimate from the smooth side is used instead.

use std::collections::BTreeMap;

use rand::Rng;

use super::params::{Gradients, ParameterSet};
use super::tape::{Bound, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest per-input relative error `|g_a - g_n| / max(|g_a|, |g_n|, floor)`
    /// measured in the L2 norm over the input tensor.
    pub max_rel_err: f64,
    pub evaluations: usize,
}

/// Norm floor below which relative error degrades to absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Relative disagreement between the `h` and `h/2` central differences
/// above which the step is taken to straddle a kink.
const KINK_RATIO: f64 = 1e-6;

/// Step shrink factor and number of retries when both sides of the
/// step contain a kink.
const SHRINK: f64 = 0.25;
const RETRIES: usize = 4;

/// Derivative at 0 of `f`, a function of the offset along one coordinate.
/// Returns the estimate and the number of evaluations.
pub fn derivative<E>(mut f: E, h: f64) -> Result<(f64, usize)>
where
    E: FnMut(f64) -> Result<f64>,
{
    let f0 = f(0.0)?;
    let mut evaluations = 1;
    let mut h = h;
    let mut fallback = 0.0;
    for _ in 0..=RETRIES {
        let (p1, m1, p2, m2) = (f(h)?, f(-h)?, f(h / 2.0)?, f(-h / 2.0)?);
        evaluations += 4;
        let roundoff = 64.0 * f64::EPSILON * p1.abs().max(m1.abs()).max(f0.abs()) / h;
        let agree = |a: f64, b: f64| (a - b).abs() <= KINK_RATIO * a.abs().max(b.abs()) + roundoff;
        let d1 = (p1 - m1) / (2.0 * h);
        let d2 = (p2 - m2) / h;
        if agree(d1, d2) {
            return Ok(((4.0 * d2 - d1) / 3.0, evaluations));
        }
        let (fw1, fw2) = ((p1 - f0) / h, (p2 - f0) / (h / 2.0));
        let (bw1, bw2) = ((f0 - m1) / h, (f0 - m2) / (h / 2.0));
        if agree(fw1, fw2) {
            return Ok((2.0 * fw2 - fw1, evaluations));
        }
        if agree(bw1, bw2) {
            return Ok((2.0 * bw2 - bw1, evaluations));
        }
        fallback = d2;
        h *= SHRINK;
    }
    Ok((fallback, evaluations))
}

/// Compares the tape gradient of `f` against finite differences with step `h`.
///
/// `f` builds a scalar from the supplied input variables; it is re-run on a
/// fresh tape for every perturbation.
pub fn check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(&format!("x{i}"), t.clone()))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut evaluations = 0;
    let mut xs = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut num2 = 0.0;
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            let (numeric, n) = derivative(
                |d| {
                    xs[i].data_mut()[j] = orig + d;
                    eval(&xs)
                },
                h,
            )?;
            xs[i].data_mut()[j] = orig;
            evaluations += n;
            diff2 += (numeric - a.data()[j]).powi(2);
            num2 += numeric * numeric;
        }
        let denom = a.squared_norm().sqrt().max(num2.sqrt()).max(REL_ERR_FLOOR);
        worst = worst.max(diff2.sqrt() / denom);
    }
    Ok(GradCheck {
        max_rel_err: worst,
        evaluations,
    })
}

/// Coordinates to compare, per parameter name. `None` means all.
pub type Coords = BTreeMap<String, Vec<usize>>;

/// Picks up to `per_tensor` random coordinates of every tensor (all of them
/// for smaller tensors) whose name starts with one of `prefixes`.
pub fn sample_coords<R: Rng + ?Sized>(
    params: &ParameterSet,
    prefixes: &[&str],
    per_tensor: usize,
    rng: &mut R,
) -> Coords {
    params
        .iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(n, t)| {
            let idx = if t.len() <= per_tensor {
                (0..t.len()).collect()
            } else {
                let mut v = rand::seq::index::sample(rng, t.len(), per_tensor).into_vec();
                v.sort_unstable();
                v
            };
            (n.clone(), idx)
        })
        .collect()
}

/// Compares `analytic` against central differences of `eval` around
/// `params` over the chosen coordinates. The relative error is taken over
/// the whole sampled vector, so tensors whose gradient is tiny next to the
/// rest do not report finite-difference noise; the tensor contributing the
/// largest error is named.
pub fn compare<E>(
    analytic: &Gradients,
    params: &ParameterSet,
    coords: Option<&Coords>,
    mut eval: E,
    h: f64,
) -> Result<(GradCheck, String)>
where
    E: FnMut(&ParameterSet) -> Result<f64>,
{
    let all: Coords;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = params.iter().map(|(n, t)| (n.clone(), (0..t.len()).collect())).collect();
            &all
        }
    };
    let mut p = params.clone();
    let mut worst = (0.0f64, String::new());
    let (mut diff2, mut num2, mut ana2) = (0.0, 0.0, 0.0);
    let mut evaluations = 0;
    for (name, idx) in coords {
        let a = analytic
            .get(name)
            .ok_or_else(|| Error::contract("gradcheck", format!("no gradient for `{name}`")))?;
        let mut tensor_diff2 = 0.0;
        for &j in idx {
            let orig = params.get(name).expect("checked above").data()[j];
            let (numeric, n) = derivative(
                |d| {
                    p.get_mut(name).expect("same names").data_mut()[j] = orig + d;
                    eval(&p)
                },
                h,
            )?;
            p.get_mut(name).expect("same names").data_mut()[j] = orig;
            evaluations += n;
            tensor_diff2 += (numeric - a.data()[j]).powi(2);
            num2 += numeric * numeric;
            ana2 += a.data()[j] * a.data()[j];
        }
        diff2 += tensor_diff2;
        if worst.1.is_empty() || tensor_diff2 > worst.0 {
            worst = (tensor_diff2, name.clone());
        }
    }
    let denom = ana2.sqrt().max(num2.sqrt()).max(REL_ERR_FLOOR);
    Ok((
        GradCheck {
            max_rel_err: diff2.sqrt() / denom,
            evaluations,
        },
        worst.1,
    ))
}

/// [`check`] over a named parameter set; `f` reads its inputs from the
/// bound parameters. Reports the worst tensor by name.
pub fn check_params<F>(f: F, params: &ParameterSet, coords: Option<&Coords>, h: f64) -> Result<(GradCheck, String)>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let out = f(&mut tape, &bound)?;
    tape.backward(out)?;
    let grads = tape.gradients(&bound);
    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(p);
        let out = f(&mut tape, &bound)?;
        Ok(tape.value(out).item())
    };
    compare(&grads, params, coords, eval, h)
}
