//! Generalized advantage estimation.

use crate::error::{Error, Result};

/// Advantages and returns-to-go for one trajectory.
///
/// `values` has one more entry than `rewards`: the last is the bootstrap
/// value of the final state (zero when the episode truly ended).
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    gae_lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::contract(
            "compute_gae",
            format!("{} values for {} rewards", values.len(), rewards.len()),
        ));
    }
    let t = rewards.len();
    let mut adv = vec![0.0; t];
    let mut next = 0.0;
    for i in (0..t).rev() {
        let delta = rewards[i] + gamma * values[i + 1] - values[i];
        next = delta + gamma * gae_lambda * next;
        adv[i] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts and scales to mean 0, std 1; leaves the input alone when its
/// spread is negligible.
pub fn standardize(x: &mut [f64]) {
    if x.len() < 2 {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return;
    }
    x.iter_mut().for_each(|v| *v = (*v - mean) / std);
}
