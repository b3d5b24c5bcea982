//! Granular judge annotation: prompt rendering, response parsing, the
//! offline mock judge, and a resumable annotation runner.

mod client;
mod mock;
mod parse;
mod prompt;

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{
    Clock, FakeClock, HttpTransport, JudgeClient, JudgeClientConfig, JudgeReply, JudgeRequest,
    JudgeTransport, MockTransport, RateLimiter, SystemClock, TransportError,
};
pub use mock::{mock_gold_answer, mock_judge, MockRubric};
pub use parse::{parse_judge_response, ParseErrorKind, ParseJudgeError, ParsedJudgement};
pub use prompt::{render_judge_prompt, JudgePromptTemplate};

use crate::jsonl::{self, Appender, JsonlError};
use crate::schema::{AnnotationRecord, CompletionSet, PromptSample, QualityScores};

#[derive(Debug, Error)]
pub enum AnnotatorError {
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("invalid judge config: {0}")]
    Config(String),
    #[error("template: {0}")]
    Template(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// A prompt and its completions, as handed to the judge.
#[derive(Debug, Clone, Copy)]
pub struct JudgeItem<'a> {
    pub sample: &'a PromptSample,
    pub completions: &'a CompletionSet,
}

/// Why a single item failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JudgeFailure {
    Transport(TransportError),
    Parse(ParseJudgeError),
    Render(String),
}

impl std::fmt::Display for JudgeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            JudgeFailure::Transport(e) => write!(f, "{e}"),
            JudgeFailure::Parse(e) => write!(f, "unparseable judge output: {e}"),
            JudgeFailure::Render(e) => write!(f, "{e}"),
        }
    }
}

impl JudgeClient {
    /// Renders, sends and parses one annotation request.
    pub fn annotate_one(
        &self,
        item: JudgeItem<'_>,
        template: &JudgePromptTemplate,
    ) -> Result<AnnotationRecord, JudgeFailure> {
        let prompt = render_judge_prompt(item.sample, item.completions, template)
            .map_err(|e| JudgeFailure::Render(e.to_string()))?;
        let request = JudgeRequest {
            prompt_id: item.sample.id.clone(),
            prompt,
            image_ref: item.sample.image_ref.clone(),
            model: self.config.model.clone(),
            temperature: self.config.temperature,
        };
        let reply = self
            .call(&item, &request)
            .map_err(JudgeFailure::Transport)?;
        let parsed = parse_judge_response(&reply.text, item.completions.completions.len())
            .map_err(JudgeFailure::Parse)?;
        Ok(parsed.into_record(&item.sample.id))
    }
}

/// Scores a batch of responses to one prompt (used by the evaluations).
pub trait ResponseJudge: Sync {
    fn score(
        &self,
        sample: &PromptSample,
        responses: &[String],
    ) -> Result<Vec<QualityScores>, String>;
}

impl ResponseJudge for MockRubric {
    fn score(
        &self,
        sample: &PromptSample,
        responses: &[String],
    ) -> Result<Vec<QualityScores>, String> {
        Ok(responses
            .iter()
            .map(|r| MockRubric::score(self, sample, r))
            .collect())
    }
}

/// Live judge: one rendered call per prompt, rating all responses together.
pub struct ClientJudge<'a> {
    pub client: &'a JudgeClient,
    pub template: JudgePromptTemplate,
}

impl ResponseJudge for ClientJudge<'_> {
    fn score(
        &self,
        sample: &PromptSample,
        responses: &[String],
    ) -> Result<Vec<QualityScores>, String> {
        let set = CompletionSet {
            prompt_id: sample.id.clone(),
            completions: responses.to_vec(),
            sampler_temperature: 0.0,
            sampler_seed: 0,
        };
        self.client
            .annotate_one(
                JudgeItem {
                    sample,
                    completions: &set,
                },
                &self.template,
            )
            .map(|r| r.per_completion_scores)
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointStatus {
    Annotated,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub prompt_id: String,
    pub status: CheckpointStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectRecord {
    pub prompt_id: String,
    pub reason: String,
    /// Judge text, when one was received.
    pub raw_response: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AnnotatePaths {
    pub out: PathBuf,
    pub rejects: PathBuf,
    pub checkpoint: PathBuf,
}

impl AnnotatePaths {
    /// `ann.jsonl` → `ann.rejects.jsonl`, `ann.checkpoint.jsonl`.
    pub fn beside(out: &Path) -> Self {
        let stem = out
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("annotations");
        let dir = out.parent().unwrap_or(Path::new(""));
        Self {
            out: out.to_path_buf(),
            rejects: dir.join(format!("{stem}.rejects.jsonl")),
            checkpoint: dir.join(format!("{stem}.checkpoint.jsonl")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AnnotateSummary {
    pub annotated: usize,
    pub rejected: usize,
    pub skipped: usize,
}

/// Pairs prompts with their completion sets by id, in prompt order.
/// Prompts without completions are left out.
pub fn join_completions<'a>(
    samples: &'a [PromptSample],
    completions: &'a [CompletionSet],
) -> Result<Vec<JudgeItem<'a>>, AnnotatorError> {
    let by_id: HashMap<&str, &CompletionSet> = completions
        .iter()
        .map(|c| (c.prompt_id.as_str(), c))
        .collect();
    let known: HashSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    if let Some(orphan) = completions
        .iter()
        .find(|c| !known.contains(c.prompt_id.as_str()))
    {
        return Err(AnnotatorError::Mismatch(format!(
            "completions reference unknown prompt `{}`",
            orphan.prompt_id
        )));
    }
    Ok(samples
        .iter()
        .filter_map(|s| {
            by_id.get(s.id.as_str()).map(|c| JudgeItem {
                sample: s,
                completions: c,
            })
        })
        .collect())
}

/// Annotates every item not already in the checkpoint.
///
/// Up to `max_in_flight` requests run concurrently; results are written in
/// input order. Items that still fail after retries go to the rejects file.
/// An authentication failure stops the run after persisting everything that
/// completed before it.
pub fn annotate(
    items: &[JudgeItem<'_>],
    client: &JudgeClient,
    template: &JudgePromptTemplate,
    paths: &AnnotatePaths,
    retry_rejects: bool,
) -> Result<AnnotateSummary, AnnotatorError> {
    let done: HashSet<String> = jsonl::read_or_empty::<CheckpointEntry>(&paths.checkpoint)?
        .into_iter()
        .filter(|e| !retry_rejects || e.status == CheckpointStatus::Annotated)
        .map(|e| e.prompt_id)
        .collect();
    let pending: Vec<&JudgeItem<'_>> = items
        .iter()
        .filter(|i| !done.contains(&i.sample.id))
        .collect();
    let mut summary = AnnotateSummary {
        skipped: items.len() - pending.len(),
        ..Default::default()
    };
    if pending.is_empty() {
        return Ok(summary);
    }

    let mut out = Appender::open(&paths.out)?;
    let mut rejects = Appender::open(&paths.rejects)?;
    let mut ckpt = Appender::open(&paths.checkpoint)?;
    let client = Arc::new(client);

    for chunk in pending.chunks(client.config.max_in_flight) {
        let results: Vec<Result<AnnotationRecord, JudgeFailure>> = if chunk.len() == 1 {
            vec![client.annotate_one(*chunk[0], template)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|item| {
                        let client = client.clone();
                        scope.spawn(move || client.annotate_one(**item, template))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("judge worker panicked"))
                    .collect()
            })
        };
        // Everything that finished is persisted before an auth failure
        // stops the run, so a resume never re-sends completed work.
        let mut auth_failure = None;
        for (item, result) in chunk.iter().zip(results) {
            let id = item.sample.id.clone();
            match result {
                Ok(record) => {
                    out.append(&record)?;
                    ckpt.append(&CheckpointEntry {
                        prompt_id: id,
                        status: CheckpointStatus::Annotated,
                    })?;
                    summary.annotated += 1;
                }
                Err(JudgeFailure::Transport(TransportError::Auth(msg))) => {
                    auth_failure.get_or_insert(msg);
                }
                Err(failure) => {
                    let raw_response = match &failure {
                        JudgeFailure::Parse(p) => Some(p.raw.clone()),
                        _ => None,
                    };
                    log::warn!("rejecting `{id}`: {failure}");
                    rejects.append(&RejectRecord {
                        prompt_id: id.clone(),
                        reason: failure.to_string(),
                        raw_response,
                    })?;
                    ckpt.append(&CheckpointEntry {
                        prompt_id: id,
                        status: CheckpointStatus::Rejected,
                    })?;
                    summary.rejected += 1;
                }
            }
        }
        if let Some(msg) = auth_failure {
            return Err(AnnotatorError::Auth(msg));
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Source;

    fn fixture(n: usize) -> (Vec<PromptSample>, Vec<CompletionSet>) {
        let samples: Vec<_> = (0..n)
            .map(|i| PromptSample {
                id: format!("p{i}"),
                image_ref: Some(format!("images/{i}.jpg")),
                question: format!("What is in picture {i}?"),
                source: Source::Synthetic,
            })
            .collect();
        let comps = samples
            .iter()
            .map(|s| CompletionSet {
                prompt_id: s.id.clone(),
                completions: vec!["one".into(), "two".into(), "three".into(), "four".into()],
                sampler_temperature: 0.7,
                sampler_seed: 1,
            })
            .collect();
        (samples, comps)
    }

    #[test]
    fn render_structure() {
        let (s, c) = fixture(1);
        let tpl = JudgePromptTemplate::default();
        let text = render_judge_prompt(&s[0], &c[0], &tpl).unwrap();
        for i in 1..=4 {
            assert!(text.contains(&format!("Completion {i}:")));
        }
        for m in crate::schema::Metric::ALL {
            assert!(text.contains(m.label()));
        }
        assert!(text.contains("[Image: images/0.jpg]"));
        assert!(text.contains("What is in picture 0?"));
        assert_eq!(text, render_judge_prompt(&s[0], &c[0], &tpl).unwrap());

        let mut empty = s[0].clone();
        empty.question = "  ".into();
        assert!(matches!(
            render_judge_prompt(&empty, &c[0], &tpl),
            Err(AnnotatorError::Mismatch(_))
        ));
        let mut other = c[0].clone();
        other.prompt_id = "zzz".into();
        assert!(matches!(
            render_judge_prompt(&s[0], &other, &tpl),
            Err(AnnotatorError::Mismatch(_))
        ));
    }

    #[test]
    fn join_rejects_orphans() {
        let (s, mut c) = fixture(2);
        assert_eq!(join_completions(&s, &c).unwrap().len(), 2);
        c[0].prompt_id = "nope".into();
        assert!(join_completions(&s, &c).is_err());
    }
}
