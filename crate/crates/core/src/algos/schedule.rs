//! Exploration and learning-rate schedules.

/// Linear anneal from `start` to `end` over `steps` environment steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.05,
            steps: 50_000,
        }
    }
}

impl EpsilonSchedule {
    /// Exactly `end` from `steps` on.
    pub fn at(&self, t: u64) -> f64 {
        if t >= self.steps {
            return self.end;
        }
        let slope = (self.start - self.end) / self.steps as f64;
        (self.start - t as f64 * slope).max(self.end)
    }
}

/// `base * factor^(episodes / interval)`.
pub fn decayed_lr(base: f64, factor: f64, interval: u64, episodes: u64) -> f64 {
    base * factor.powi((episodes / interval) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_examples() {
        let e = EpsilonSchedule::default();
        assert_eq!(e.at(0), 1.0);
        assert!((e.at(25_000) - 0.525).abs() < 1e-12);
        assert_eq!(e.at(50_000), 0.05);
        assert_eq!(e.at(1_000_000), 0.05);
    }

    #[test]
    fn lr_halves_per_interval() {
        assert_eq!(decayed_lr(3e-4, 0.5, 50_000, 49_999), 3e-4);
        assert_eq!(decayed_lr(3e-4, 0.5, 50_000, 50_000), 1.5e-4);
        assert_eq!(decayed_lr(3e-4, 0.5, 50_000, 120_000), 7.5e-5);
    }
}
