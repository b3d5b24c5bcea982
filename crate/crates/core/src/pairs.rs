//! Turns annotated completion sets into training data: DPO preference pairs,
//! best-of-K (rejection sampling) SFT, score-conditioned SFT and judge-gold SFT.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::policy::Vocab;
use crate::schema::{AnnotationRecord, CompletionSet, Metric, PromptSample, QualityScores};
use crate::train::{truncate_response, DpoExample, SftExample};

/// Appended to every question before it is fed to the policy.
pub const PROMPT_SUFFIX: &str = "\nA:";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlignmentError {
    #[error("annotation for `{0}` has no matching completion set")]
    MissingCompletions(String),
    #[error("annotation for `{0}` has no matching prompt")]
    MissingPrompt(String),
    #[error("`{prompt_id}`: {scores} score rows for {completions} completions")]
    CountMismatch {
        prompt_id: String,
        scores: usize,
        completions: usize,
    },
    #[error("duplicate annotation for `{0}`")]
    Duplicate(String),
}

#[derive(Debug, Error)]
pub enum PairError {
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error("no gold answer for prompt `{0}`")]
    MissingAnswer(String),
    #[error("bad pair-builder config: {0}")]
    Config(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Which metrics are summed into a selection score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    /// helpfulness + correctness
    #[default]
    Hc,
    /// helpfulness + correctness + coherence
    Hcc,
}

impl Aggregate {
    pub fn of(self, s: &QualityScores) -> i64 {
        match self {
            Aggregate::Hc => s.dpo_score() as i64,
            Aggregate::Hcc => s.rs_score() as i64,
        }
    }
}

/// Whether the chosen response must outscore the rejected one, or the
/// reverse (the literal reading of the original margin sentence).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MarginDirection {
    #[default]
    Higher,
    Literal,
}

impl std::str::FromStr for MarginDirection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "higher" => Ok(Self::Higher),
            "literal" | "lower" => Ok(Self::Literal),
            _ => Err(format!("unknown margin direction `{s}` (higher|literal)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub min_margin: i64,
    pub margin_direction: MarginDirection,
    pub chosen_aggregate: Aggregate,
    pub margin_aggregate: Aggregate,
    pub seed: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            min_margin: 2,
            margin_direction: MarginDirection::Higher,
            chosen_aggregate: Aggregate::Hc,
            margin_aggregate: Aggregate::Hcc,
            seed: 0,
        }
    }
}

/// One prompt with its completions and their scores, index-aligned.
#[derive(Debug, Clone, Copy)]
pub struct AnnotatedPrompt<'a> {
    pub sample: &'a PromptSample,
    pub completions: &'a [String],
    pub scores: &'a [QualityScores],
}

/// Joins prompts, completion sets and annotations by prompt id, in prompt
/// order. Prompts without an annotation are skipped; their count is returned.
pub fn align<'a>(
    samples: &'a [PromptSample],
    completions: &'a [CompletionSet],
    annotations: &'a [AnnotationRecord],
) -> Result<(Vec<AnnotatedPrompt<'a>>, usize), AlignmentError> {
    let comps: HashMap<&str, &CompletionSet> = completions
        .iter()
        .map(|c| (c.prompt_id.as_str(), c))
        .collect();
    let known: HashSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let mut anns: HashMap<&str, &AnnotationRecord> = HashMap::new();
    for a in annotations {
        let id = a.prompt_id.as_str();
        if !known.contains(id) {
            return Err(AlignmentError::MissingPrompt(id.into()));
        }
        let c = comps
            .get(id)
            .ok_or_else(|| AlignmentError::MissingCompletions(id.into()))?;
        if c.completions.len() != a.per_completion_scores.len() {
            return Err(AlignmentError::CountMismatch {
                prompt_id: id.into(),
                scores: a.per_completion_scores.len(),
                completions: c.completions.len(),
            });
        }
        if anns.insert(id, a).is_some() {
            return Err(AlignmentError::Duplicate(id.into()));
        }
    }
    let mut out = Vec::with_capacity(anns.len());
    let mut unannotated = 0;
    for s in samples {
        match anns.get(s.id.as_str()) {
            Some(a) => out.push(AnnotatedPrompt {
                sample: s,
                completions: &comps[s.id.as_str()].completions,
                scores: &a.per_completion_scores,
            }),
            None => unannotated += 1,
        }
    }
    Ok((out, unannotated))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_id: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_index: usize,
    pub rejected_index: usize,
    pub chosen_scores: QualityScores,
    pub rejected_scores: QualityScores,
    /// Margin-aggregate of chosen minus that of rejected.
    pub margin: i64,
}

/// Index of the first maximum of `key`. `None` for an empty slice.
pub fn argmax_first<T>(items: &[T], key: impl Fn(&T) -> i64) -> Option<usize> {
    let mut best: Option<(usize, i64)> = None;
    for (i, it) in items.iter().enumerate() {
        let k = key(it);
        if best.is_none_or(|(_, b)| k > b) {
            best = Some((i, k));
        }
    }
    best.map(|(i, _)| i)
}

/// The chosen index and every index that may serve as its rejected partner.
pub fn pair_candidates(scores: &[QualityScores], cfg: &PairConfig) -> Option<(usize, Vec<usize>)> {
    let chosen = argmax_first(scores, |s| cfg.chosen_aggregate.of(s))?;
    let top = cfg.margin_aggregate.of(&scores[chosen]);
    let eligible = scores
        .iter()
        .enumerate()
        .filter(|&(i, s)| {
            let gap = match cfg.margin_direction {
                MarginDirection::Higher => top - cfg.margin_aggregate.of(s),
                MarginDirection::Literal => cfg.margin_aggregate.of(s) - top,
            };
            i != chosen && gap >= cfg.min_margin
        })
        .map(|(i, _)| i)
        .collect();
    Some((chosen, eligible))
}

fn prompt_rng(seed: u64, prompt_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(prompt_id.as_bytes());
    let d = h.finalize();
    ChaCha8Rng::from_seed(d.into())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoStats {
    pub kept: usize,
    /// Prompts where no completion met the margin.
    pub dropped: usize,
}

/// One pair per prompt: chosen is the first completion maximizing the chosen
/// aggregate, rejected is drawn uniformly (seeded per prompt) from those
/// clearing the margin. Prompts with no such partner are dropped.
pub fn build_dpo_pairs(
    prompts: &[AnnotatedPrompt<'_>],
    cfg: &PairConfig,
) -> (Vec<PreferencePair>, DpoStats) {
    let mut pairs = Vec::new();
    let mut stats = DpoStats::default();
    for p in prompts {
        let Some((c, eligible)) = pair_candidates(p.scores, cfg) else {
            stats.dropped += 1;
            continue;
        };
        if eligible.is_empty() {
            stats.dropped += 1;
            continue;
        }
        let mut rng = prompt_rng(cfg.seed, &p.sample.id);
        let r = eligible[rng.random_range(0..eligible.len())];
        pairs.push(PreferencePair {
            prompt_id: p.sample.id.clone(),
            image_ref: p.sample.image_ref.clone(),
            prompt: p.sample.question.clone(),
            chosen: p.completions[c].clone(),
            rejected: p.completions[r].clone(),
            chosen_index: c,
            rejected_index: r,
            chosen_scores: p.scores[c],
            rejected_scores: p.scores[r],
            margin: cfg.margin_aggregate.of(&p.scores[c]) - cfg.margin_aggregate.of(&p.scores[r]),
        });
        stats.kept += 1;
    }
    (pairs, stats)
}

/// Plain (prompt, response) supervision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt_id: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    pub prompt: String,
    pub response: String,
}

/// Index of the best completion by helpfulness + correctness + coherence.
pub fn select_best(scores: &[QualityScores]) -> Option<usize> {
    argmax_first(scores, |s| s.rs_score() as i64)
}

/// The top-scoring completion per prompt, with no extra conditioning.
pub fn build_rejection_sampling(prompts: &[AnnotatedPrompt<'_>]) -> Vec<SftRecord> {
    prompts
        .iter()
        .filter_map(|p| {
            select_best(p.scores).map(|i| SftRecord {
                prompt_id: p.sample.id.clone(),
                image_ref: p.sample.image_ref.clone(),
                prompt: p.sample.question.clone(),
                response: p.completions[i].clone(),
            })
        })
        .collect()
}

/// Renders scores into the conditioning line.
/// Placeholders: `{h}`, `{c}`, `{coh}`, `{cx}`, `{v}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerTemplate {
    pub format: String,
    pub separator: String,
}

impl Default for SteerTemplate {
    fn default() -> Self {
        Self {
            format: "helpfulness:{h},correctness:{c},coherence:{coh},complexity:{cx},verbosity:{v}"
                .into(),
            separator: "\n".into(),
        }
    }
}

impl SteerTemplate {
    pub fn render(&self, s: &QualityScores) -> String {
        // `{coh}` and `{cx}` first so `{c}` can't eat their prefix.
        self.format
            .replace("{coh}", &s.coherence().to_string())
            .replace("{cx}", &s.complexity().to_string())
            .replace("{h}", &s.helpfulness().to_string())
            .replace("{c}", &s.correctness().to_string())
            .replace("{v}", &s.verbosity().to_string())
    }

    pub fn condition(&self, question: &str, s: &QualityScores) -> String {
        format!("{question}{}{}", self.separator, self.render(s))
    }

    /// Prompt used at inference time: every attribute at its maximum.
    pub fn inference_prompt(&self, question: &str) -> String {
        self.condition(question, &QualityScores::max())
    }
}

/// Reads `metric:value` fields back out of the last line of a conditioned
/// prompt.
pub fn parse_steer_suffix(conditioned: &str) -> Option<QualityScores> {
    let line = conditioned.lines().last()?;
    let fields: HashMap<&str, i64> = line
        .split(',')
        .filter_map(|f| {
            let (k, v) = f.split_once(':')?;
            Some((k.trim(), v.trim().parse().ok()?))
        })
        .collect();
    let mut raw = [0i64; 5];
    for (slot, m) in raw.iter_mut().zip(Metric::ALL) {
        *slot = *fields.get(m.name())?;
    }
    QualityScores::new(raw).ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteerLmExample {
    pub prompt_id: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    pub conditioned_prompt: String,
    pub response: String,
}

/// Every completion becomes an example conditioned on its own scores.
pub fn build_steerlm(
    prompts: &[AnnotatedPrompt<'_>],
    template: &SteerTemplate,
) -> Vec<SteerLmExample> {
    prompts
        .iter()
        .flat_map(|p| {
            p.completions
                .iter()
                .zip(p.scores)
                .map(|(c, s)| SteerLmExample {
                    prompt_id: p.sample.id.clone(),
                    image_ref: p.sample.image_ref.clone(),
                    conditioned_prompt: template.condition(&p.sample.question, s),
                    response: c.clone(),
                })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnswer {
    pub prompt_id: String,
    pub answer: String,
}

/// Judge answers as SFT targets, one per prompt. Empty answers are kept and
/// counted; the trainer skips them.
pub fn build_gold_sft(
    samples: &[PromptSample],
    answers: &[GoldAnswer],
) -> Result<(Vec<SftRecord>, usize), PairError> {
    let by_id: HashMap<&str, &str> = answers
        .iter()
        .map(|a| (a.prompt_id.as_str(), a.answer.as_str()))
        .collect();
    let mut empty = 0;
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let answer = by_id
            .get(s.id.as_str())
            .ok_or_else(|| PairError::MissingAnswer(s.id.clone()))?;
        if answer.trim().is_empty() {
            log::warn!("empty gold answer for `{}`", s.id);
            empty += 1;
        }
        out.push(SftRecord {
            prompt_id: s.id.clone(),
            image_ref: s.image_ref.clone(),
            prompt: s.question.clone(),
            response: answer.to_string(),
        });
    }
    Ok((out, empty))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub prompts: usize,
    pub unannotated: usize,
    pub dpo_kept: usize,
    pub dpo_dropped: usize,
    pub rs_examples: usize,
    pub steerlm_examples: usize,
    pub gold_examples: usize,
    pub gold_empty: usize,
}

pub struct BuiltDatasets {
    pub pairs: Vec<PreferencePair>,
    pub rs: Vec<SftRecord>,
    pub steerlm: Vec<SteerLmExample>,
    pub gold: Vec<SftRecord>,
    pub stats: BuildStats,
}

/// Builds all four datasets. Gold SFT is built only when answers are given.
pub fn build_all(
    samples: &[PromptSample],
    completions: &[CompletionSet],
    annotations: &[AnnotationRecord],
    gold_answers: Option<&[GoldAnswer]>,
    cfg: &PairConfig,
    template: &SteerTemplate,
) -> Result<BuiltDatasets, PairError> {
    let (prompts, unannotated) = align(samples, completions, annotations)?;
    let (pairs, dpo) = build_dpo_pairs(&prompts, cfg);
    let rs = build_rejection_sampling(&prompts);
    let steerlm = build_steerlm(&prompts, template);
    let (gold, gold_empty) = match gold_answers {
        Some(a) => build_gold_sft(samples, a)?,
        None => (Vec::new(), 0),
    };
    let stats = BuildStats {
        prompts: samples.len(),
        unannotated,
        dpo_kept: dpo.kept,
        dpo_dropped: dpo.dropped,
        rs_examples: rs.len(),
        steerlm_examples: steerlm.len(),
        gold_examples: gold.len(),
        gold_empty,
    };
    Ok(BuiltDatasets {
        pairs,
        rs,
        steerlm,
        gold,
        stats,
    })
}

impl BuiltDatasets {
    /// Writes `pairs.jsonl`, `rs_sft.jsonl`, `steerlm_sft.jsonl`,
    /// `gold_sft.jsonl` and `stats.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), PairError> {
        jsonl::write(&dir.join("pairs.jsonl"), &self.pairs)?;
        jsonl::write(&dir.join("rs_sft.jsonl"), &self.rs)?;
        jsonl::write(&dir.join("steerlm_sft.jsonl"), &self.steerlm)?;
        jsonl::write(&dir.join("gold_sft.jsonl"), &self.gold)?;
        let path = dir.join("stats.json");
        let text = serde_json::to_string_pretty(&self.stats).expect("stats serialize") + "\n";
        std::fs::write(&path, text).map_err(|source| PairError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn format_prompt(question: &str) -> String {
    format!("{question}{PROMPT_SUFFIX}")
}

/// Tokenizes pairs for the DPO trainer.
pub fn to_dpo_examples(pairs: &[PreferencePair], vocab: &Vocab, max_len: usize) -> Vec<DpoExample> {
    pairs
        .iter()
        .map(|p| DpoExample {
            prompt_id: p.prompt_id.clone(),
            prompt: vocab.encode(&format_prompt(&p.prompt)),
            chosen: truncate_response(vocab.encode(&p.chosen), max_len),
            rejected: truncate_response(vocab.encode(&p.rejected), max_len),
        })
        .collect()
}

pub fn to_sft_examples(records: &[SftRecord], vocab: &Vocab, max_len: usize) -> Vec<SftExample> {
    records
        .iter()
        .map(|r| SftExample {
            prompt_id: r.prompt_id.clone(),
            prompt: vocab.encode(&format_prompt(&r.prompt)),
            response: truncate_response(vocab.encode(&r.response), max_len),
        })
        .collect()
}

pub fn steerlm_to_sft(
    examples: &[SteerLmExample],
    vocab: &Vocab,
    max_len: usize,
) -> Vec<SftExample> {
    examples
        .iter()
        .map(|e| SftExample {
            prompt_id: e.prompt_id.clone(),
            prompt: vocab.encode(&format_prompt(&e.conditioned_prompt)),
            response: truncate_response(vocab.encode(&e.response), max_len),
        })
        .collect()
}
