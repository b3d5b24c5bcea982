//! Planted-preference fixtures: synthetic prompts, a pretrained reference
//! policy over short letter strings, and a judge that rewards one target
//! symbol. Lets the alignment loop be checked against a known right answer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotator::MockRubric;
use crate::pairs::format_prompt;
use crate::policy::{PolicyError, TinyPolicy, Vocab};
use crate::schema::{PromptSample, Source};

const SUBJECTS: [&str; 8] = [
    "chart", "photo", "diagram", "street", "kitchen", "plot", "map", "screen",
];
const ASKS: [&str; 6] = [
    "What stands out in this",
    "Name one thing in the",
    "Describe the",
    "Give a word for the",
    "Summarize the",
    "Label the",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    /// The symbol the mock judge rewards.
    pub target: String,
    /// Chance that a letter of a reference-corpus response is the target.
    pub target_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub corpus_size: usize,
    pub order: usize,
    pub smoothing: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            target: "z".into(),
            target_rate: 0.04,
            min_len: 1,
            max_len: 4,
            corpus_size: 5000,
            order: 2,
            smoothing: 1e-3,
        }
    }
}

/// `n` image-question prompts with ids `{prefix}-{i:05}`.
pub fn synthetic_prompts(n: usize, seed: u64, prefix: &str) -> Vec<PromptSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let ask = ASKS[rng.random_range(0..ASKS.len())];
            let subject = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
            PromptSample {
                id: format!("{prefix}-{i:05}"),
                image_ref: Some(format!("synthetic/{prefix}-{i:05}.png")),
                question: format!("{ask} {subject} #{}?", rng.random_range(0..1000)),
                source: Source::Synthetic,
            }
        })
        .collect()
}

fn corpus_response(cfg: &PlantedConfig, rng: &mut ChaCha8Rng) -> String {
    let target = cfg.target.chars().next().unwrap_or('z');
    let others: Vec<char> = ('a'..='z').filter(|&c| c != target).collect();
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    (0..len)
        .map(|_| {
            if rng.random_bool(cfg.target_rate) {
                target
            } else {
                others[rng.random_range(0..others.len())]
            }
        })
        .collect()
}

/// Count-fitted byte-level policy over random short letter strings; the
/// target shows up at roughly `target_rate` per letter.
pub fn reference_policy(cfg: &PlantedConfig, seed: u64) -> Result<TinyPolicy, PolicyError> {
    let vocab = Vocab::bytes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompts = synthetic_prompts(cfg.corpus_size, seed ^ 0x5eed, "corpus");
    let corpus: Vec<_> = prompts
        .iter()
        .map(|p| {
            (
                vocab.encode(&format_prompt(&p.question)),
                vocab.encode(&corpus_response(cfg, &mut rng)),
            )
        })
        .collect();
    TinyPolicy::fit_counts(vocab, cfg.order, &corpus, cfg.smoothing)
}

/// Mock judge whose hidden answer is the target for every prompt.
pub fn planted_rubric(cfg: &PlantedConfig, seed: u64) -> MockRubric {
    MockRubric::with_target(seed, &cfg.target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompts_are_seeded() {
        let a = synthetic_prompts(20, 1, "p");
        assert_eq!(a, synthetic_prompts(20, 1, "p"));
        assert_ne!(a, synthetic_prompts(20, 2, "p"));
        assert_eq!(a[3].id, "p-00003");
    }

    #[test]
    fn reference_rarely_emits_target() {
        let cfg = PlantedConfig::default();
        let policy = reference_policy(&cfg, 0).unwrap();
        let prompt = policy
            .vocab()
            .encode(&format_prompt("Describe the map #1?"));
        let hits = (0..2000)
            .filter(|&s| {
                let r = policy.sample(&prompt, 0.7, s, 16).unwrap();
                r.contains(&(b'z' as u16))
            })
            .count();
        assert!((20..400).contains(&hits), "{hits}");
    }
}
