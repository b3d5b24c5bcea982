//! DPO and SFT training of the tabular policy.

mod objective;
mod optim;
mod schedule;
mod trainer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{PolicyError, RefLogProbCache, SeqLogProb, TinyPolicy, Token};
use crate::Exec;

pub use objective::{dpo_logit, dpo_loss, neg_log_sigmoid, sft_loss, sigmoid, LossOutput};
pub use optim::{Optimizer, OptimizerKind};
pub use schedule::{CosineSchedule, ScheduleConfig, ScheduleKind};
pub use trainer::{
    train, Dpo, GradAccumulator, Objective, Sft, StepMetrics, TrainOptions, TrainOutputs,
    TrainReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseSide {
    Chosen,
    Rejected,
}

impl std::fmt::Display for ResponseSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResponseSide::Chosen => "chosen",
            ResponseSide::Rejected => "rejected",
        })
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no reference log-prob cached for {which} response of `{prompt_id}`")]
    CacheMiss {
        prompt_id: String,
        which: ResponseSide,
    },
    #[error("empty target response for `{0}`")]
    EmptyTarget(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub use_average_logprob: bool,
    pub learning_rate: f64,
    pub grad_accum_steps: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            use_average_logprob: false,
            learning_rate: 5e-5,
            grad_accum_steps: 4,
            batch_size: 8,
            max_len: 300,
            epochs: 1,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(TrainError::Config(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if self.grad_accum_steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "grad_accum_steps and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if self.max_len == 0 {
            return Err(TrainError::Config("max_len must be >= 1".into()));
        }
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            grad_accum_steps: self.grad_accum_steps,
            epochs: self.epochs,
            seed: self.seed,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            batch_size: 16,
            grad_accum_steps: 1,
            max_len: 2048,
            epochs: 1,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if self.grad_accum_steps == 0 || self.batch_size == 0 || self.max_len == 0 {
            return Err(TrainError::Config(
                "batch_size, grad_accum_steps, max_len must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            grad_accum_steps: self.grad_accum_steps,
            epochs: self.epochs,
            seed: self.seed,
            optimizer: self.optimizer,
        }
    }
}

/// Tokenized preference pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoExample {
    pub prompt_id: String,
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
}

/// Tokenized supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub prompt_id: String,
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
}

/// Caps a response so that, with EOS appended, it spans at most `max_len` tokens.
pub fn truncate_response(mut tokens: Vec<Token>, max_len: usize) -> Vec<Token> {
    tokens.truncate(max_len.saturating_sub(1));
    tokens
}

/// Scores every chosen and rejected response under the frozen reference.
/// Entries already present are kept as they are.
pub fn precompute_ref_logprobs(
    reference: &TinyPolicy,
    examples: &[DpoExample],
    cache: &mut RefLogProbCache,
    exec: Exec,
) -> Result<usize, TrainError> {
    let todo: Vec<(&str, &[Token], &[Token])> = examples
        .iter()
        .flat_map(|e| {
            [
                (
                    e.prompt_id.as_str(),
                    e.prompt.as_slice(),
                    e.chosen.as_slice(),
                ),
                (
                    e.prompt_id.as_str(),
                    e.prompt.as_slice(),
                    e.rejected.as_slice(),
                ),
            ]
        })
        .filter(|(id, _, resp)| !cache.contains(id, resp))
        .collect();
    let scored: Vec<SeqLogProb> = exec.try_map(&todo, |(_, prompt, resp)| {
        reference.seq_logprob(prompt, resp)
    })?;
    let mut added = 0;
    for ((id, _, resp), lp) in todo.iter().zip(scored) {
        if !cache.contains(id, resp) {
            cache.insert(id, resp, lp);
            added += 1;
        }
    }
    Ok(added)
}
