//! Domain records shared by every pipeline stage: prompts, sampled
//! completions, judge annotations and the 0-4 quality rubric.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest value any rubric metric may take.
pub const MAX_SCORE: u8 = 4;

/// Default number of completions sampled per prompt.
pub const DEFAULT_COMPLETIONS: usize = 4;

/// The five rubric metrics, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Helpfulness,
    Correctness,
    Coherence,
    Complexity,
    Verbosity,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Helpfulness,
        Metric::Correctness,
        Metric::Coherence,
        Metric::Complexity,
        Metric::Verbosity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Helpfulness => "helpfulness",
            Metric::Correctness => "correctness",
            Metric::Coherence => "coherence",
            Metric::Complexity => "complexity",
            Metric::Verbosity => "verbosity",
        }
    }

    /// Capitalized label as it appears in the labeling guide.
    pub fn label(self) -> &'static str {
        match self {
            Metric::Helpfulness => "Helpfulness",
            Metric::Correctness => "Correctness",
            Metric::Coherence => "Coherence",
            Metric::Complexity => "Complexity",
            Metric::Verbosity => "Verbosity",
        }
    }

    /// Labeling-guide description of the metric.
    pub fn description(self) -> &'static str {
        match self {
            Metric::Helpfulness => "Measures if the response fully addresses the prompt's request.",
            Metric::Correctness => {
                "Assesses the accuracy and relevance of the information, ensuring it's free from errors or misinformation."
            }
            Metric::Coherence => "Evaluates the clarity and logical consistency of the response.",
            Metric::Complexity => {
                "Looks at the level of sophistication in the language used, from simple to advanced."
            }
            Metric::Verbosity => {
                "Considers the brevity or lengthiness of the response in relation to the prompt's needs."
            }
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("{metric} score {value} is outside 0..=4")]
    OutOfRange { metric: Metric, value: i64 },
}

/// Five integer rubric scores for one completion. Always in `0..=4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct QualityScores {
    helpfulness: u8,
    correctness: u8,
    coherence: u8,
    complexity: u8,
    verbosity: u8,
}

impl QualityScores {
    /// Validates raw scores in metric order
    /// (helpfulness, correctness, coherence, complexity, verbosity).
    pub fn new(raw: [i64; 5]) -> Result<Self, ScoreError> {
        let mut out = [0u8; 5];
        for (slot, (metric, value)) in out.iter_mut().zip(Metric::ALL.iter().zip(raw)) {
            if !(0..=MAX_SCORE as i64).contains(&value) {
                return Err(ScoreError::OutOfRange {
                    metric: *metric,
                    value,
                });
            }
            *slot = value as u8;
        }
        Ok(Self::from_validated(out))
    }

    fn from_validated(v: [u8; 5]) -> Self {
        Self {
            helpfulness: v[0],
            correctness: v[1],
            coherence: v[2],
            complexity: v[3],
            verbosity: v[4],
        }
    }

    pub fn zero() -> Self {
        Self::from_validated([0; 5])
    }

    pub fn max() -> Self {
        Self::from_validated([MAX_SCORE; 5])
    }

    pub fn helpfulness(&self) -> u8 {
        self.helpfulness
    }
    pub fn correctness(&self) -> u8 {
        self.correctness
    }
    pub fn coherence(&self) -> u8 {
        self.coherence
    }
    pub fn complexity(&self) -> u8 {
        self.complexity
    }
    pub fn verbosity(&self) -> u8 {
        self.verbosity
    }

    pub fn get(&self, metric: Metric) -> u8 {
        self.as_array()[metric.index()]
    }

    pub fn as_array(&self) -> [u8; 5] {
        [
            self.helpfulness,
            self.correctness,
            self.coherence,
            self.complexity,
            self.verbosity,
        ]
    }

    /// Helpfulness + correctness, used to pick the preferred completion.
    pub fn dpo_score(&self) -> u32 {
        self.helpfulness as u32 + self.correctness as u32
    }

    /// Helpfulness + correctness + coherence, used for best-of-K selection
    /// and the pair margin filter.
    pub fn rs_score(&self) -> u32 {
        self.dpo_score() + self.coherence as u32
    }
}

/// Sum of helpfulness and correctness; range `0..=8`.
pub fn aggregate_dpo_score(s: &QualityScores) -> u32 {
    s.dpo_score()
}

/// Sum of helpfulness, correctness and coherence; range `0..=12`.
pub fn aggregate_rs_score(s: &QualityScores) -> u32 {
    s.rs_score()
}

/// Checks five raw integers against the rubric range.
pub fn validate_scores(raw: [i64; 5]) -> Result<QualityScores, ScoreError> {
    QualityScores::new(raw)
}

impl<'de> Deserialize<'de> for QualityScores {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            helpfulness: i64,
            correctness: i64,
            coherence: i64,
            complexity: i64,
            verbosity: i64,
        }
        let r = Raw::deserialize(d)?;
        QualityScores::new([
            r.helpfulness,
            r.correctness,
            r.coherence,
            r.complexity,
            r.verbosity,
        ])
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Source {
    LrvInstruct,
    Scigraphqa,
    Synthetic,
}

impl std::str::FromStr for Source {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "LRV_INSTRUCT" | "LRV" => Ok(Source::LrvInstruct),
            "SCIGRAPHQA" => Ok(Source::Scigraphqa),
            "SYNTHETIC" => Ok(Source::Synthetic),
            other => Err(format!("unknown prompt source `{other}`")),
        }
    }
}

/// One (image, question) prompt. `image_ref` is passed through untouched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSample {
    pub id: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    pub question: String,
    pub source: Source,
}

/// The K completions sampled for one prompt, in sampling order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionSet {
    pub prompt_id: String,
    pub completions: Vec<String>,
    pub sampler_temperature: f64,
    pub sampler_seed: u64,
}

/// Judge output for one completion set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub prompt_id: String,
    pub per_completion_scores: Vec<QualityScores>,
    pub reasoning: String,
    pub raw_response: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qs(v: [i64; 5]) -> QualityScores {
        QualityScores::new(v).unwrap()
    }

    #[test]
    fn dpo_aggregate_examples() {
        assert_eq!(aggregate_dpo_score(&qs([4, 4, 4, 3, 3])), 8);
        assert_eq!(aggregate_dpo_score(&QualityScores::zero()), 0);
        assert_eq!(aggregate_dpo_score(&qs([3, 3, 3, 2, 3])), 6);
    }

    #[test]
    fn rs_aggregate_examples() {
        assert_eq!(aggregate_rs_score(&qs([4, 4, 4, 3, 3])), 12);
        assert_eq!(aggregate_rs_score(&QualityScores::zero()), 0);
        assert_eq!(aggregate_rs_score(&qs([3, 4, 4, 2, 2])), 11);
    }

    #[test]
    fn validation() {
        assert!(validate_scores([4, 4, 4, 3, 3]).is_ok());
        assert!(validate_scores([0, 0, 0, 0, 0]).is_ok());
        assert_eq!(
            validate_scores([5, 0, 0, 0, 0]),
            Err(ScoreError::OutOfRange {
                metric: Metric::Helpfulness,
                value: 5
            })
        );
        assert_eq!(
            validate_scores([0, 0, 0, -1, 0]),
            Err(ScoreError::OutOfRange {
                metric: Metric::Complexity,
                value: -1
            })
        );
    }

    #[test]
    fn aggregates_over_whole_domain() {
        let mut n = 0;
        for code in 0..5u32.pow(5) {
            let mut raw = [0i64; 5];
            let mut c = code;
            for slot in raw.iter_mut() {
                *slot = (c % 5) as i64;
                c /= 5;
            }
            let s = qs(raw);
            assert!(s.dpo_score() <= 8 && s.rs_score() <= 12);
            assert_eq!(s.rs_score() - s.dpo_score(), s.coherence() as u32);
            n += 1;
        }
        assert_eq!(n, 3125);
    }

    #[test]
    fn deserialize_rejects_fractional_and_out_of_range() {
        let ok = r#"{"helpfulness":4,"correctness":4,"coherence":4,"complexity":3,"verbosity":3}"#;
        assert_eq!(
            serde_json::from_str::<QualityScores>(ok).unwrap(),
            qs([4, 4, 4, 3, 3])
        );
        let frac =
            r#"{"helpfulness":3.5,"correctness":4,"coherence":4,"complexity":3,"verbosity":3}"#;
        assert!(serde_json::from_str::<QualityScores>(frac).is_err());
        let big = r#"{"helpfulness":9,"correctness":4,"coherence":4,"complexity":3,"verbosity":3}"#;
        assert!(serde_json::from_str::<QualityScores>(big).is_err());
    }

    #[test]
    fn source_wire_names() {
        let p = PromptSample {
            id: "a".into(),
            image_ref: None,
            question: "q".into(),
            source: Source::LrvInstruct,
        };
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"LRV_INSTRUCT\""), "{s}");
        assert!(s.contains("\"image_ref\":null"));
        assert_eq!("scigraphqa".parse::<Source>().unwrap(), Source::Scigraphqa);
    }
}
