//! Shared mini-batch training loop.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::{dpo_loss, sft_loss, LossOutput};
use super::{
    CosineSchedule, DpoConfig, DpoExample, Optimizer, OptimizerKind, ScheduleConfig, SftExample,
    TrainError,
};
use crate::jsonl::Appender;
use crate::policy::{GradTable, RefLogProbCache, TinyPolicy};
use crate::Exec;

/// Something the loop can minimize, one example at a time.
pub trait Objective: Sync {
    type Example: Sync;
    fn evaluate(&self, policy: &TinyPolicy, ex: &Self::Example) -> Result<LossOutput, TrainError>;
}

pub struct Dpo<'a> {
    pub cache: &'a RefLogProbCache,
    pub cfg: &'a DpoConfig,
}

impl Objective for Dpo<'_> {
    type Example = DpoExample;
    fn evaluate(&self, policy: &TinyPolicy, ex: &DpoExample) -> Result<LossOutput, TrainError> {
        dpo_loss(policy, self.cache, ex, self.cfg)
    }
}

pub struct Sft;

impl Objective for Sft {
    type Example = SftExample;
    fn evaluate(&self, policy: &TinyPolicy, ex: &SftExample) -> Result<LossOutput, TrainError> {
        sft_loss(policy, ex)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

/// One optimizer step's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Fraction of the step's pairs whose DPO logit is positive (DPO only).
    pub pref_acc: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
    pub skipped_empty: usize,
    pub total_steps: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.loss)
    }

    /// Example-weighted preference accuracy over the last `steps` steps.
    pub fn recent_pref_acc(&self, steps: usize) -> Option<f64> {
        let tail: Vec<f64> = self
            .metrics
            .iter()
            .rev()
            .take(steps)
            .filter_map(|m| m.pref_acc)
            .collect();
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Sums per-example loss gradients in arrival order; the step uses their mean.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    sum: GradTable,
    count: usize,
    loss_sum: f64,
    positive: usize,
    logits: usize,
}

impl GradAccumulator {
    pub fn new(width: usize) -> Self {
        Self {
            sum: GradTable::new(width),
            count: 0,
            loss_sum: 0.0,
            positive: 0,
            logits: 0,
        }
    }

    pub fn add(&mut self, out: &LossOutput) {
        self.sum.add_scaled(&out.grad, 1.0);
        self.count += 1;
        self.loss_sum += out.loss;
        if let Some(z) = out.logit {
            self.logits += 1;
            if z > 0.0 {
                self.positive += 1;
            }
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.count as f64
    }

    pub fn pref_acc(&self) -> Option<f64> {
        (self.logits > 0).then(|| self.positive as f64 / self.logits as f64)
    }

    pub fn mean_grad(&self) -> GradTable {
        let mut g = self.sum.clone();
        if self.count > 0 {
            g.scale(1.0 / self.count as f64);
        }
        g
    }
}

/// Where the loop writes per-step metrics and per-epoch checkpoints.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Write a metrics line every this many steps (0 and 1 mean every step).
    pub log_every: usize,
    /// Checkpoint every this many epochs; the last epoch is always saved.
    /// 0 saves only the last.
    pub checkpoint_every: usize,
}

/// Seeded per-epoch shuffling; each optimizer step averages the loss
/// gradient over `batch_size * grad_accum_steps` examples (fewer at the end
/// of an epoch). Per-example work fans out via `exec`; merging and the
/// parameter update are sequential and in example order.
pub fn train<O: Objective>(
    policy: &mut TinyPolicy,
    examples: &[O::Example],
    objective: &O,
    opts: &TrainOptions,
    schedule: &ScheduleConfig,
    exec: Exec,
    outputs: &TrainOutputs,
) -> Result<TrainReport, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if opts.batch_size == 0 || opts.grad_accum_steps == 0 {
        return Err(TrainError::Config(
            "batch_size and grad_accum_steps must be >= 1".into(),
        ));
    }
    if !(0.0..1.0).contains(&schedule.warmup_ratio) {
        return Err(TrainError::Config(format!(
            "warmup_ratio {} outside [0, 1)",
            schedule.warmup_ratio
        )));
    }
    let per_step = opts.batch_size * opts.grad_accum_steps;
    let steps_per_epoch = examples.len().div_ceil(per_step);
    let total_steps = schedule
        .total_steps
        .unwrap_or(steps_per_epoch * opts.epochs)
        .max(1);
    let lr_schedule = CosineSchedule::new(opts.learning_rate, schedule.warmup_ratio, total_steps);

    let mut metrics_out = match &outputs.metrics_path {
        Some(p) => {
            if p.exists() {
                std::fs::remove_file(p).map_err(|e| TrainError::Io(e.to_string()))?;
            }
            Some(Appender::open(p).map_err(|e| TrainError::Io(e.to_string()))?)
        }
        None => None,
    };

    let width = policy.vocab().output_size();
    let mut optimizer = Optimizer::new(opts.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport {
        total_steps,
        ..Default::default()
    };
    let mut step = 0;
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(per_step) {
            let snapshot: &TinyPolicy = policy;
            let outs = exec.map(chunk, |&i| objective.evaluate(snapshot, &examples[i]));
            let mut acc = GradAccumulator::new(width);
            for out in outs {
                match out {
                    Ok(o) => acc.add(&o),
                    Err(TrainError::EmptyTarget(id)) => {
                        if epoch == 1 {
                            log::warn!("skipping empty target `{id}`");
                            report.skipped_empty += 1;
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
            if acc.count() == 0 {
                continue;
            }
            step += 1;
            let lr = lr_schedule.lr_at(step);
            optimizer.step(policy, &acc.mean_grad(), lr);
            let m = StepMetrics {
                step,
                epoch,
                loss: acc.mean_loss(),
                lr,
                pref_acc: acc.pref_acc(),
            };
            if let Some(w) = metrics_out
                .as_mut()
                .filter(|_| step % outputs.log_every.max(1) == 0)
            {
                w.append(&m).map_err(|e| TrainError::Io(e.to_string()))?;
            }
            report.metrics.push(m);
        }
        let due = epoch == opts.epochs
            || (outputs.checkpoint_every > 0 && epoch % outputs.checkpoint_every == 0);
        if let Some(dir) = outputs.checkpoint_dir.as_ref().filter(|_| due) {
            policy
                .save(&dir.join(format!("epoch-{epoch:04}.json")))
                .map_err(|e| TrainError::Io(e.to_string()))?;
        }
    }
    if report.metrics.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(report)
}
