//! Deterministic offline judge with a hidden rubric.
//!
//! Helpfulness is the recall of the prompt's target string (as a byte
//! multiset), correctness its Dice overlap, coherence loses a point per
//! immediately repeated byte, verbosity follows length buckets and complexity
//! the number of distinct bytes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::schema::{CompletionSet, PromptSample, QualityScores};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRubric {
    pub seed: u64,
    /// Shared target for every prompt; otherwise one is derived per prompt.
    #[serde(default)]
    pub target: Option<String>,
}

impl MockRubric {
    pub fn new(seed: u64) -> Self {
        Self { seed, target: None }
    }

    pub fn with_target(seed: u64, target: &str) -> Self {
        Self {
            seed,
            target: Some(target.to_string()),
        }
    }

    /// The hidden reference answer for `sample`.
    pub fn target_for(&self, sample: &PromptSample) -> String {
        if let Some(t) = &self.target {
            return t.clone();
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(sample.id.as_bytes());
        let d = h.finalize();
        let len = 3 + (d[0] % 4) as usize;
        d[1..=len].iter().map(|b| (b'a' + b % 26) as char).collect()
    }

    pub fn score(&self, sample: &PromptSample, completion: &str) -> QualityScores {
        score_against(self.target_for(sample).as_bytes(), completion.as_bytes())
    }
}

fn floor4(x: f64) -> i64 {
    ((4.0 * x) + 1e-9).floor() as i64
}

pub(crate) fn score_against(target: &[u8], completion: &[u8]) -> QualityScores {
    let mut pool = [0usize; 256];
    for &b in target {
        pool[b as usize] += 1;
    }
    let mut overlap = 0usize;
    for &b in completion {
        if pool[b as usize] > 0 {
            pool[b as usize] -= 1;
            overlap += 1;
        }
    }
    let recall = if target.is_empty() {
        0.0
    } else {
        overlap as f64 / target.len() as f64
    };
    let denom = target.len() + completion.len();
    let dice = if denom == 0 {
        0.0
    } else {
        2.0 * overlap as f64 / denom as f64
    };
    let coherence = if completion.is_empty() {
        0
    } else {
        let repeats = completion.windows(2).filter(|w| w[0] == w[1]).count() as i64;
        4 - repeats.min(4)
    };
    let verbosity = match completion.len() {
        0 => 0,
        1..=7 => 1,
        8..=23 => 2,
        24..=63 => 3,
        _ => 4,
    };
    let mut seen = [false; 256];
    let distinct = completion
        .iter()
        .filter(|&&b| !std::mem::replace(&mut seen[b as usize], true))
        .count() as i64;
    let complexity = ((distinct + 2) / 3).min(4);
    QualityScores::new([
        floor4(recall),
        floor4(dice),
        coherence,
        complexity,
        verbosity,
    ])
    .expect("rubric stays in range")
}

/// Judge text for all completions of one prompt, in the layout
/// [`super::parse_judge_response`] reads.
pub fn mock_judge(
    sample: &PromptSample,
    completions: &CompletionSet,
    rubric: &MockRubric,
) -> String {
    let scores: Vec<QualityScores> = completions
        .completions
        .iter()
        .map(|c| rubric.score(sample, c))
        .collect();
    let best = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.rs_score().cmp(&b.1.rs_score()).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i + 1)
        .unwrap_or(1);
    let mut out = format!(
        "Reasoning: I compared each of the {} candidates against what the question asks for. \
         Candidate {best} addresses it best overall.\n",
        completions.completions.len()
    );
    for (i, s) in scores.iter().enumerate() {
        out.push_str(&format!(
            "Rating for Response {}: Helpfulness: {}, Correctness: {}, Coherence: {}, Complexity: {}, Verbosity: {}\n",
            i + 1,
            s.helpfulness(),
            s.correctness(),
            s.coherence(),
            s.complexity(),
            s.verbosity()
        ));
    }
    out
}

/// Gold answer the mock judge gives when asked the question directly.
pub fn mock_gold_answer(sample: &PromptSample, rubric: &MockRubric) -> String {
    rubric.target_for(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::parse_judge_response;
    use crate::schema::Source;

    fn sample(id: &str) -> PromptSample {
        PromptSample {
            id: id.into(),
            image_ref: Some("img/1.png".into()),
            question: "What is shown?".into(),
            source: Source::Synthetic,
        }
    }

    #[test]
    fn rubric_extremes() {
        let r = MockRubric::new(5);
        let s = sample("p1");
        let target = r.target_for(&s);
        let top = r.score(&s, &target);
        assert_eq!((top.helpfulness(), top.correctness()), (4, 4));
        let empty = r.score(&s, "");
        assert_eq!(empty.helpfulness(), 0);
        assert_eq!(empty, QualityScores::zero());
    }

    #[test]
    fn rubric_components() {
        let s = score_against(b"z", b"aaz");
        assert_eq!(s.as_array(), [4, 2, 3, 1, 1]);
        let s = score_against(b"z", b"ab");
        assert_eq!(s.as_array(), [0, 0, 4, 1, 1]);
        let long = vec![b'q'; 70];
        assert_eq!(score_against(b"z", &long).as_array(), [0, 0, 0, 1, 4]);
    }

    #[test]
    fn output_parses_back() {
        let r = MockRubric::new(1);
        for i in 0..50 {
            let s = sample(&format!("p{i}"));
            let t = r.target_for(&s);
            let cs = CompletionSet {
                prompt_id: s.id.clone(),
                completions: vec![t.clone(), String::new(), format!("{t}{t}xx"), "abc".into()],
                sampler_temperature: 0.7,
                sampler_seed: i,
            };
            let raw = mock_judge(&s, &cs, &r);
            assert_eq!(raw, mock_judge(&s, &cs, &r));
            let parsed = parse_judge_response(&raw, 4).unwrap();
            let expect: Vec<_> = cs.completions.iter().map(|c| r.score(&s, c)).collect();
            assert_eq!(parsed.per_completion_scores, expect);
        }
    }
}
