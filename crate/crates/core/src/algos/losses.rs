//! Loss terms built on the tape.
//!
//! Row-wise terms are `[R, 1]` columns with a per-row weight; a weight of 0
//! drops padding and dead agents. Every function returns a scalar variable.

use log::debug;

use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var, MASK_SENTINEL};

fn column(tape: &mut Tape, values: &[f64]) -> Var {
    tape.constant(Tensor::from_column(values))
}

fn check_rows(tape: &Tape, op: &'static str, x: Var, lens: &[usize]) -> Result<usize> {
    let rows = tape.value(x).rows();
    if tape.value(x).cols() != 1 {
        return Err(Error::contract(op, format!("expected a column, got {:?}", tape.value(x).shape())));
    }
    if let Some(bad) = lens.iter().find(|&&l| l != rows) {
        return Err(Error::contract(op, format!("{bad} entries for {rows} rows")));
    }
    Ok(rows)
}

/// `sum_r w_r x_r / sum_r w_r`; zero when every weight is zero.
pub fn weighted_mean(tape: &mut Tape, x: Var, weights: &[f64]) -> Result<Var> {
    check_rows(tape, "weighted_mean", x, &[weights.len()])?;
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let w = column(tape, weights);
    let wx = tape.mul_col(x, w)?;
    let s = tape.sum(wx)?;
    tape.scale(s, 1.0 / total)
}

/// Masked log-softmax of `[R, A]` logits; unavailable entries are pinned to
/// the sentinel before normalizing.
pub fn masked_log_policy(tape: &mut Tape, logits: Var, keep: &[bool]) -> Result<Var> {
    let filled = tape.masked_fill(logits, keep, MASK_SENTINEL)?;
    tape.log_softmax(filled)
}

/// Entropy of each row of a masked policy, `[R, 1]`, counting available
/// actions only.
pub fn masked_entropy(tape: &mut Tape, log_probs: Var, keep: &[bool]) -> Result<Var> {
    let probs = tape.exp(log_probs)?;
    let logs = tape.masked_fill(log_probs, keep, 0.0)?;
    let plogp = tape.mul(probs, logs)?;
    let s = tape.sum_cols(plogp)?;
    tape.neg(s)
}

#[allow(clippy::too_many_arguments)]
/// Clipped-ratio surrogate with entropy bonus, as a loss to minimize.
///
/// `logp_new`, `entropy`: `[R, 1]`; `old_logp`, `advantages`, `weights`: length R.
pub fn ppo_actor_loss(
    tape: &mut Tape,
    logp_new: Var,
    old_logp: &[f64],
    advantages: &[f64],
    entropy: Var,
    weights: &[f64],
    eps_p: f64,
    lambda_e: f64,
) -> Result<Var> {
    check_rows(tape, "ppo_actor_loss", logp_new, &[old_logp.len(), advantages.len(), weights.len()])?;
    check_rows(tape, "ppo_actor_loss", entropy, &[weights.len()])?;
    if old_logp.iter().zip(weights).any(|(l, &w)| w > 0.0 && !l.is_finite()) {
        return Err(Error::contract(
            "ppo_actor_loss",
            "old probability of a taken action is zero; ratio undefined",
        ));
    }
    let old = column(tape, old_logp);
    let diff = tape.sub(logp_new, old)?;
    let ratio = tape.exp(diff)?;
    let adv = column(tape, advantages);
    let unclipped = tape.mul(ratio, adv)?;
    let clipped = tape.clip(ratio, 1.0 - eps_p, 1.0 + eps_p)?;
    let clipped = tape.mul(clipped, adv)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    let surr = weighted_mean(tape, surrogate, weights)?;
    let ent = weighted_mean(tape, entropy, weights)?;
    let ent = tape.scale(ent, lambda_e)?;
    let s = tape.add(surr, ent)?;
    tape.neg(s)
}

/// Value loss: the larger of the plain and the clipped squared error.
pub fn value_loss(
    tape: &mut Tape,
    v_new: Var,
    v_old: &[f64],
    returns: &[f64],
    weights: &[f64],
    eps_v: f64,
) -> Result<Var> {
    check_rows(tape, "value_loss", v_new, &[v_old.len(), returns.len(), weights.len()])?;
    let old = column(tape, v_old);
    let ret = column(tape, returns);
    let e1 = tape.sub(v_new, ret)?;
    let e1 = tape.square(e1)?;
    let d = tape.sub(v_new, old)?;
    let d = tape.clip(d, -eps_v, eps_v)?;
    let vc = tape.add(old, d)?;
    let e2 = tape.sub(vc, ret)?;
    let e2 = tape.square(e2)?;
    let worst = tape.maximum(e1, e2)?;
    weighted_mean(tape, worst, weights)
}

/// Mean squared difference over the `keep` entries of `[M, A]` predictions.
fn masked_mse(tape: &mut Tape, op: &'static str, pred: Var, target: &[f64], keep: &[bool]) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if target.len() != tape.value(pred).len() || keep.len() != target.len() {
        return Err(Error::contract(
            op,
            format!("prediction {shape:?}, {} targets, {} mask bits", target.len(), keep.len()),
        ));
    }
    let count = keep.iter().filter(|&&k| k).count();
    if count == 0 {
        debug!("{op}: no cross-group entries to compare; loss is zero");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let t = tape.constant(Tensor::new(shape, target.to_vec())?);
    let d = tape.sub(pred, t)?;
    let sq = tape.square(d)?;
    let sq = tape.masked_fill(sq, keep, 0.0)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / count as f64)
}

/// Cross-group inverse loss, policy form.
///
/// Each row of `pred_logits` is one (agent, other group) pair; `keep` holds
/// that group's mask. Predictions are masked then normalized, and compared to
/// the (detached) target policy at the kept entries.
pub fn cgi_policy_loss(tape: &mut Tape, pred_logits: Var, targets: &[f64], keep: &[bool]) -> Result<Var> {
    if tape.value(pred_logits).is_empty() {
        debug!("cgi_policy_loss: no other group; loss is zero");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let filled = tape.masked_fill(pred_logits, keep, MASK_SENTINEL)?;
    let probs = tape.softmax(filled)?;
    masked_mse(tape, "cgi_policy_loss", probs, targets, keep)
}

/// Cross-group inverse loss, value form: raw predicted values against the
/// other group's (detached) values at the kept entries.
pub fn cgi_value_loss(tape: &mut Tape, pred_q: Var, targets: &[f64], keep: &[bool]) -> Result<Var> {
    if tape.value(pred_q).is_empty() {
        debug!("cgi_value_loss: no other group; loss is zero");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    masked_mse(tape, "cgi_value_loss", pred_q, targets, keep)
}

/// Squared TD error against detached targets, averaged over weighted rows.
pub fn td_loss(tape: &mut Tape, q_tot: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
    check_rows(tape, "td_loss", q_tot, &[targets.len(), weights.len()])?;
    let y = column(tape, targets);
    let d = tape.sub(q_tot, y)?;
    let sq = tape.square(d)?;
    weighted_mean(tape, sq, weights)
}

/// Actor + λ_V·value + λ_I·CGI. With no CGI term or λ_I = 0 the CGI graph is
/// not referenced at all.
pub fn umappo_total_loss(
    tape: &mut Tape,
    actor: Var,
    value: Var,
    cgi: Option<Var>,
    lambda_v: f64,
    lambda_i: f64,
) -> Result<Var> {
    let v = tape.scale(value, lambda_v)?;
    let base = tape.add(actor, v)?;
    add_cgi(tape, base, cgi, lambda_i)
}

/// TD + λ_I·CGI.
pub fn uqmix_total_loss(tape: &mut Tape, td: Var, cgi: Option<Var>, lambda_i: f64) -> Result<Var> {
    add_cgi(tape, td, cgi, lambda_i)
}

fn add_cgi(tape: &mut Tape, base: Var, cgi: Option<Var>, lambda_i: f64) -> Result<Var> {
    match cgi {
        Some(c) if lambda_i != 0.0 => {
            let c = tape.scale(c, lambda_i)?;
            tape.add(base, c)
        }
        _ => Ok(base),
    }
}
