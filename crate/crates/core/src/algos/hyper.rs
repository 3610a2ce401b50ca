//! Hyperparameter records with the reference defaults.

use serde::{Deserialize, Serialize};

use crate::action_space::LayoutKind;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UMappoHyperparameters {
    pub lr: f64,
    pub eps_p: f64,
    pub eps_v: f64,
    pub lambda_e: f64,
    pub lambda_v: f64,
    pub lambda_i: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Optimization epochs per collected batch.
    pub ppo_epochs: usize,
    /// Complete episodes collected before each update.
    pub episodes_per_update: usize,
    pub max_grad_norm: f64,
    /// Multiplies environment rewards before learning (evaluation is unscaled).
    pub reward_scale: f64,
}

impl Default for UMappoHyperparameters {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            eps_p: 0.2,
            eps_v: 0.2,
            lambda_e: 0.01,
            lambda_v: 1.0,
            lambda_i: 0.8,
            gamma: 0.99,
            gae_lambda: 0.95,
            ppo_epochs: 5,
            episodes_per_update: 1,
            max_grad_norm: 10.0,
            reward_scale: 1.0,
        }
    }
}

impl UMappoHyperparameters {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        check_common(&mut v, self.lr, self.gamma, self.max_grad_norm, self.reward_scale);
        if !(self.eps_p > 0.0 && self.eps_v > 0.0) {
            v.push("eps_p and eps_v must be positive".to_string());
        }
        if self.lambda_e < 0.0 || self.lambda_v < 0.0 || self.lambda_i < 0.0 {
            v.push("loss coefficients must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            v.push("gae_lambda must lie in [0, 1]".into());
        }
        if self.ppo_epochs == 0 || self.episodes_per_update == 0 {
            v.push("ppo_epochs and episodes_per_update must be at least 1".into());
        }
        finish(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UQmixHyperparameters {
    pub lr: f64,
    pub lambda_i: f64,
    pub gamma: f64,
    pub buffer_size: usize,
    pub batch_size: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_anneal_steps: u64,
    /// Learning-rate multiplier applied every `lr_decay_episodes` episodes.
    pub lr_decay: f64,
    pub lr_decay_episodes: u64,
    /// Training iterations between hard target copies.
    pub target_sync_interval: usize,
    pub max_grad_norm: f64,
    pub reward_scale: f64,
}

impl Default for UQmixHyperparameters {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            lambda_i: 0.06,
            gamma: 0.99,
            buffer_size: 5000,
            batch_size: 32,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_steps: 50_000,
            lr_decay: 0.5,
            lr_decay_episodes: 50_000,
            target_sync_interval: 200,
            max_grad_norm: 10.0,
            reward_scale: 1.0,
        }
    }
}

impl UQmixHyperparameters {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        check_common(&mut v, self.lr, self.gamma, self.max_grad_norm, self.reward_scale);
        if self.lambda_i < 0.0 {
            v.push("lambda_i must be non-negative".to_string());
        }
        if self.batch_size == 0 || self.buffer_size < self.batch_size {
            v.push("need buffer_size >= batch_size >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.eps_end) || self.eps_end > self.eps_start || self.eps_start > 1.0 {
            v.push("need 0 <= eps_end <= eps_start <= 1".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_episodes == 0 {
            v.push("lr_decay must lie in (0, 1] with a positive interval".into());
        }
        if self.target_sync_interval == 0 {
            v.push("target_sync_interval must be at least 1".into());
        }
        finish(v)
    }
}

fn check_common(v: &mut Vec<String>, lr: f64, gamma: f64, clip: f64, scale: f64) {
    if !(lr > 0.0 && lr.is_finite()) {
        v.push("lr must be positive".into());
    }
    if !(0.0..1.0).contains(&gamma) {
        v.push("gamma must lie in [0, 1)".into());
    }
    if clip.is_nan() || clip <= 0.0 {
        v.push("max_grad_norm must be positive".into());
    }
    if !(scale > 0.0 && scale.is_finite()) {
        v.push("reward_scale must be positive".into());
    }
}

fn finish(v: Vec<String>) -> Result<()> {
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(v.join("; ")))
    }
}

/// Which of the two contributions are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_uas: bool,
    pub use_cgi: bool,
}

impl AblationFlags {
    pub const BASE: Self = Self { use_uas: false, use_cgi: false };
    pub const FULL: Self = Self { use_uas: true, use_cgi: true };

    pub fn layout(self) -> LayoutKind {
        if self.use_uas {
            LayoutKind::Unified
        } else {
            LayoutKind::Overlapped
        }
    }

    /// Suffix used in ablation names: "", "+uas", "+cgi" (full runs are named separately).
    pub fn label(self) -> &'static str {
        match (self.use_uas, self.use_cgi) {
            (false, false) => "base",
            (true, false) => "+uas",
            (false, true) => "+cgi",
            (true, true) => "both",
        }
    }
}
