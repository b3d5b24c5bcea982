//! Cosine learning-rate schedule with linear warmup.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub kind: ScheduleKind,
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
    /// Optimizer steps; derived from dataset size when absent.
    #[serde(default)]
    pub total_steps: Option<usize>,
}

fn default_warmup_ratio() -> f64 {
    0.003
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            warmup_ratio: default_warmup_ratio(),
            total_steps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    /// Warmup lasts `ceil(warmup_ratio * total_steps)` steps, at least one.
    pub fn new(peak_lr: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        let total_steps = total_steps.max(1);
        let warmup_steps =
            ((warmup_ratio * total_steps as f64).ceil() as usize).clamp(1, total_steps);
        Self {
            peak_lr,
            warmup_steps,
            total_steps,
        }
    }

    /// Learning rate for 1-based optimizer step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.clamp(1, self.total_steps);
        if step <= self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let decay = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / decay;
        self.peak_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine() {
        let s = CosineSchedule::new(5e-5, 0.003, 1000);
        assert_eq!(s.warmup_steps, 3);
        assert!((s.lr_at(1) - 5e-5 / 3.0).abs() < 1e-20);
        assert_eq!(s.lr_at(3), 5e-5);
        assert!(s.lr_at(4) < 5e-5);
        assert!(s.lr_at(1000) < 1e-3 * 5e-5);
        // Midpoint of decay is half the peak.
        let mid = 3 + (1000 - 3) / 2;
        assert!((s.lr_at(mid) / 5e-5 - 0.5).abs() < 0.01);
        for w in (1..1000).collect::<Vec<_>>().windows(2).skip(3) {
            assert!(s.lr_at(w[1]) <= s.lr_at(w[0]));
        }
    }

    #[test]
    fn minimum_one_warmup_step() {
        let s = CosineSchedule::new(1.0, 0.0, 10);
        assert_eq!(s.warmup_steps, 1);
        assert_eq!(s.lr_at(1), 1.0);
        let single = CosineSchedule::new(1.0, 0.003, 1);
        assert_eq!(single.lr_at(1), 1.0);
    }
}
