//! Line-oriented parser for judge ratings.
//!
//! Accepts `Metric: n`, `Metric n` and `Metric=n`, metric names in any case,
//! and `Verbose` as a synonym for verbosity. A block is introduced by a
//! `Response N` / `Completion N` header on the rating line or on the line
//! just before it; blocks without a header take the next free index.

use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::schema::{AnnotationRecord, Metric, QualityScores};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("no rating block for completion index {0}")]
    MissingBlock(usize),
    #[error("block {block}: {metric} score {value} is outside 0..=4")]
    OutOfRange {
        block: usize,
        metric: Metric,
        value: i64,
    },
    #[error("{0}")]
    Unparseable(String),
}

/// Parse failure; keeps the raw judge text for auditing.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind}")]
pub struct ParseJudgeError {
    pub kind: ParseErrorKind,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedJudgement {
    pub reasoning: String,
    pub per_completion_scores: Vec<QualityScores>,
    pub raw_response: String,
}

impl ParsedJudgement {
    pub fn into_record(self, prompt_id: &str) -> AnnotationRecord {
        AnnotationRecord {
            prompt_id: prompt_id.to_string(),
            per_completion_scores: self.per_completion_scores,
            reasoning: self.reasoning,
            raw_response: self.raw_response,
        }
    }
}

fn metric_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\b(helpfulness|correctness|coherence|complexity|verbosity|verbose)\b\s*[:=]?\s*(-?\d+(?:\.\d+)?)",
        )
        .unwrap()
    })
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:re?s?ponse|completion)\s*#?\s*(\d+)").unwrap())
}

fn metric_from(name: &str) -> Metric {
    match name.to_ascii_lowercase().as_str() {
        "helpfulness" => Metric::Helpfulness,
        "correctness" => Metric::Correctness,
        "coherence" => Metric::Coherence,
        "complexity" => Metric::Complexity,
        _ => Metric::Verbosity,
    }
}

struct Block {
    index: usize,
    scores: [Option<i64>; 5],
}

impl Block {
    fn complete(&self) -> bool {
        self.scores.iter().all(Option::is_some)
    }
}

/// Extracts reasoning and `k` rating blocks from raw judge text.
pub fn parse_judge_response(raw: &str, k: usize) -> Result<ParsedJudgement, ParseJudgeError> {
    let fail = |kind| ParseJudgeError {
        kind,
        raw: raw.to_string(),
    };
    let mut blocks: Vec<Block> = Vec::new();
    let mut reasoning: Vec<&str> = Vec::new();
    let mut pending_header: Option<(usize, usize)> = None; // (block number, reasoning len before it)

    for line in raw.lines() {
        let metrics: Vec<_> = metric_re().captures_iter(line).collect();
        if metrics.is_empty() {
            if blocks.is_empty() {
                let header = header_re()
                    .captures(line)
                    .filter(|_| line.trim().len() <= 48);
                match header {
                    Some(c) => pending_header = Some((c[1].parse().unwrap_or(0), reasoning.len())),
                    None => pending_header = None,
                }
                reasoning.push(line);
            } else if let Some(c) = header_re()
                .captures(line)
                .filter(|_| line.trim().len() <= 48)
            {
                pending_header = Some((c[1].parse().unwrap_or(0), reasoning.len()));
            }
            continue;
        }

        let first_metric = metrics[0].get(0).unwrap().start();
        let inline = header_re()
            .captures(&line[..first_metric])
            .map(|c| c[1].parse::<usize>().unwrap_or(0));
        let header = inline.or(pending_header.map(|(n, _)| n));
        if blocks.is_empty() {
            // A header-only line directly above the first ratings is not reasoning.
            if inline.is_none() {
                if let Some((_, cut)) = pending_header {
                    reasoning.truncate(cut);
                }
            }
        }
        pending_header = None;

        let continue_current = header.is_none() && blocks.last().is_some_and(|b| !b.complete());
        if !continue_current {
            let index = match header {
                Some(0) => {
                    return Err(fail(ParseErrorKind::Unparseable(
                        "completion numbers start at 1".into(),
                    )))
                }
                Some(n) => n - 1,
                None => blocks.last().map_or(0, |b| b.index + 1),
            };
            if blocks.iter().any(|b| b.index == index) {
                return Err(fail(ParseErrorKind::Unparseable(format!(
                    "completion {} rated twice",
                    index + 1
                ))));
            }
            blocks.push(Block {
                index,
                scores: [None; 5],
            });
        }
        let block = blocks.last_mut().unwrap();
        for m in metrics {
            let metric = metric_from(&m[1]);
            let text = &m[2];
            if text.contains('.') {
                return Err(fail(ParseErrorKind::Unparseable(format!(
                    "fractional {metric} score `{text}` in completion {}",
                    block.index + 1
                ))));
            }
            let value: i64 = text.parse().map_err(|_| {
                fail(ParseErrorKind::Unparseable(format!(
                    "bad {metric} score `{text}`"
                )))
            })?;
            if !(0..=4).contains(&value) {
                return Err(fail(ParseErrorKind::OutOfRange {
                    block: block.index,
                    metric,
                    value,
                }));
            }
            let slot = &mut block.scores[metric.index()];
            if slot.is_some() {
                return Err(fail(ParseErrorKind::Unparseable(format!(
                    "{metric} given twice for completion {}",
                    block.index + 1
                ))));
            }
            *slot = Some(value);
        }
    }

    let mut scores = Vec::with_capacity(k);
    for i in 0..k {
        let b = blocks
            .iter()
            .find(|b| b.index == i)
            .ok_or_else(|| fail(ParseErrorKind::MissingBlock(i)))?;
        let mut vals = [0i64; 5];
        for (m, (dst, src)) in Metric::ALL.iter().zip(vals.iter_mut().zip(b.scores)) {
            *dst = src.ok_or_else(|| {
                fail(ParseErrorKind::Unparseable(format!(
                    "completion {} is missing {m}",
                    i + 1
                )))
            })?;
        }
        scores.push(QualityScores::new(vals).expect("range checked above"));
    }
    if let Some(extra) = blocks.iter().find(|b| b.index >= k) {
        return Err(fail(ParseErrorKind::Unparseable(format!(
            "rating for completion {} but only {k} were shown",
            extra.index + 1
        ))));
    }
    Ok(ParsedJudgement {
        reasoning: reasoning.join("\n").trim().to_string(),
        per_completion_scores: scores,
        raw_response: raw.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BEACH: &str = "I think that Response 2 is the best response because it is the most detailed, engaging, and accurate.\n\
Response 1 is also good, but it is not as detailed or engaging as Response 2.\n\
Gemini-Rating for Reponse 1: Helpfulness:3, Correctness 4, Coherence: 4, Complexity: 2, Verbose: 2\n\
Gemini-Rating for Reponse 2: Helpfulness:4, Correctness 4, Coherence: 4, Complexity: 3, Verbosity: 3.\n";

    const ROOM: &str = "Both responses are relevant to the question and provide good descriptions of the room.\n\
Gemini-Rating for Reponse 1  & Helpfulness:4, Correctness 4, Coherence: 4, Complexity: 3, Verbosity: 3.\n\
Gemini-Rating for Reponse 2  & Helpfulness:3, Correctness 3, Coherence: 3, Complexity: 2, Verbosity: 3.\n";

    fn arr(s: &QualityScores) -> [u8; 5] {
        s.as_array()
    }

    #[test]
    fn ampersand_separated_ratings() {
        let p = parse_judge_response(ROOM, 2).unwrap();
        assert_eq!(arr(&p.per_completion_scores[0]), [4, 4, 4, 3, 3]);
        assert_eq!(arr(&p.per_completion_scores[1]), [3, 3, 3, 2, 3]);
        assert!(p.reasoning.starts_with("Both responses"));
        let p = parse_judge_response(BEACH, 2).unwrap();
        assert_eq!(arr(&p.per_completion_scores[0]), [3, 4, 4, 2, 2]);
        assert_eq!(arr(&p.per_completion_scores[1]), [4, 4, 4, 3, 3]);
        assert!(p.reasoning.ends_with("as Response 2."));
    }

    #[test]
    fn missing_block() {
        let raw =
            "why\nResponse 1: helpfulness 1 correctness 1 coherence 1 complexity 1 verbosity 1\n\
                   Response 2: helpfulness 1 correctness 1 coherence 1 complexity 1 verbosity 1\n\
                   Response 3: helpfulness 1 correctness 1 coherence 1 complexity 1 verbosity 1\n";
        let err = parse_judge_response(raw, 4).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::MissingBlock(3));
        assert_eq!(err.raw, raw);
    }

    #[test]
    fn multi_line_blocks_with_header_lines() {
        let raw = "Reasoning: the second one is better.\n\n**Response 1**\nHelpfulness: 1\nCorrectness: 2\n\
                   Coherence: 3\nComplexity: 0\nVerbosity: 4\n\n**Response 2**\nHelpfulness: 4\nCorrectness: 4\n\
                   Coherence: 4\nComplexity: 2\nVerbosity: 1\n";
        let p = parse_judge_response(raw, 2).unwrap();
        assert_eq!(arr(&p.per_completion_scores[0]), [1, 2, 3, 0, 4]);
        assert_eq!(arr(&p.per_completion_scores[1]), [4, 4, 4, 2, 1]);
        assert_eq!(p.reasoning, "Reasoning: the second one is better.");
    }

    #[test]
    fn headerless_blocks_are_sequential() {
        let raw = "Helpfulness=1 Correctness=1 Coherence=1 Complexity=1 Verbosity=1\n\
                   Helpfulness=2 Correctness=2 Coherence=2 Complexity=2 Verbosity=2\n";
        let p = parse_judge_response(raw, 2).unwrap();
        assert_eq!(arr(&p.per_completion_scores[1]), [2; 5]);
        assert_eq!(p.reasoning, "");
    }

    #[test]
    fn rejects_bad_values() {
        let frac = "Response 1: Helpfulness: 3.5, Correctness: 4, Coherence: 4, Complexity: 3, Verbosity: 3";
        assert!(matches!(
            parse_judge_response(frac, 1).unwrap_err().kind,
            ParseErrorKind::Unparseable(_)
        ));
        let big =
            "Response 1: Helpfulness: 7, Correctness: 4, Coherence: 4, Complexity: 3, Verbosity: 3";
        assert_eq!(
            parse_judge_response(big, 1).unwrap_err().kind,
            ParseErrorKind::OutOfRange {
                block: 0,
                metric: Metric::Helpfulness,
                value: 7
            }
        );
        let partial = "Response 1: Helpfulness: 3, Correctness: 4";
        assert!(matches!(
            parse_judge_response(partial, 1).unwrap_err().kind,
            ParseErrorKind::Unparseable(_)
        ));
        let extra = "Response 2: Helpfulness: 3, Correctness: 4, Coherence: 4, Complexity: 3, Verbosity: 3\n\
                     Response 1: Helpfulness: 3, Correctness: 4, Coherence: 4, Complexity: 3, Verbosity: 3";
        assert!(parse_judge_response(extra, 1).is_err());
        assert!(parse_judge_response(extra, 2).is_ok());
        assert!(matches!(
            parse_judge_response("no ratings at all", 1)
                .unwrap_err()
                .kind,
            ParseErrorKind::MissingBlock(0)
        ));
    }
}
