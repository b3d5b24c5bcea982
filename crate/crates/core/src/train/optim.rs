use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::policy::{ContextKey, GradTable, TinyPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    /// `logits -= lr * grad`. Linear in the averaged gradient.
    #[default]
    Sgd,
    /// Adam with lazily updated (row-sparse) moments.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state. Only rows present in a step's gradient are touched, so
/// an empty gradient never moves the parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    steps: u64,
    first: HashMap<ContextKey, Vec<f64>>,
    second: HashMap<ContextKey, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            steps: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Descends along `grad` (a gradient of the loss).
    pub fn step(&mut self, policy: &mut TinyPolicy, grad: &GradTable, lr: f64) {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => policy.apply_delta(grad, -lr),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let width = grad.width();
                for (k, g) in grad.rows() {
                    let m = self.first.entry(k).or_insert_with(|| vec![0.0; width]);
                    let v = self.second.entry(k).or_insert_with(|| vec![0.0; width]);
                    let row = policy.row_mut(k);
                    for i in 0..width {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        row[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Vocab;

    fn policy() -> TinyPolicy {
        let mut p = TinyPolicy::uniform(Vocab::new(3).unwrap(), 1).unwrap();
        p.row_mut(ContextKey::from_tokens(&[0]))[1] = 0.5;
        p
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut p = policy();
            let before = p.clone();
            let mut opt = Optimizer::new(kind);
            opt.step(&mut p, &GradTable::new(4), 0.1);
            assert_eq!(p, before);
        }
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = policy();
        let mut g = GradTable::new(4);
        g.row_mut(ContextKey::from_tokens(&[0]))[1] = 2.0;
        Optimizer::new(OptimizerKind::Sgd).step(&mut p, &g, 0.1);
        assert!((p.row(ContextKey::from_tokens(&[0])).unwrap()[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = policy();
        let mut g = GradTable::new(4);
        g.row_mut(ContextKey::from_tokens(&[0]))[1] = 1e-3;
        Optimizer::new(OptimizerKind::adam()).step(&mut p, &g, 0.01);
        let moved = 0.5 - p.row(ContextKey::from_tokens(&[0])).unwrap()[1];
        assert!((moved - 0.01).abs() < 1e-6, "{moved}");
    }
}
