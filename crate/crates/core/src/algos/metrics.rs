//! Per-iteration metrics and trainer instrumentation.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grad::ParameterSet;

/// One JSON Lines record per training iteration. Fields that do not apply to
/// an algorithm or iteration are `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub episode: u64,
    pub loss_total: Option<f64>,
    pub loss_actor: Option<f64>,
    pub loss_td: Option<f64>,
    pub loss_value: Option<f64>,
    pub loss_cgi: Option<f64>,
    pub entropy: Option<f64>,
    pub epsilon: Option<f64>,
    pub eval_wr: Option<f64>,
    pub eval_return: Option<f64>,
    pub seed: u64,
}

/// Counters that let tests assert which code paths ran.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Instrumentation {
    pub env_steps: u64,
    pub episodes: u64,
    pub updates: u64,
    /// Times a cross-group inverse loss was built.
    pub cgi_evaluations: u64,
    /// Selected actions outside the agent's dynamic mask.
    pub illegal_actions: u64,
    pub target_syncs: u64,
}

/// Receives what a training run emits.
pub trait Observer {
    fn record(&mut self, record: &MetricsRecord) -> Result<()>;

    fn checkpoint(&mut self, _step: u64, _params: &ParameterSet) -> Result<()> {
        Ok(())
    }
}

impl Observer for Vec<MetricsRecord> {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Discards everything.
pub struct NullObserver;

impl Observer for NullObserver {
    fn record(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inapplicable_fields_serialize_as_null() {
        let r = MetricsRecord {
            step: 3,
            seed: 1,
            loss_td: Some(0.5),
            ..Default::default()
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert!(v["loss_actor"].is_null());
        assert_eq!(v["loss_td"], 0.5);
        assert_eq!(v.as_object().unwrap().len(), 12);
    }
}
