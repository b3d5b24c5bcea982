use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use granalign::annotator::{
    annotate, join_completions, AnnotatePaths, FakeClock, JudgeClient, JudgeClientConfig,
    JudgeItem, JudgePromptTemplate, JudgeReply, JudgeRequest, JudgeTransport, MockRubric,
    MockTransport, RejectRecord, TransportError,
};
use granalign::jsonl;
use granalign::schema::{AnnotationRecord, CompletionSet, PromptSample, Source};

fn fixture(n: usize) -> (Vec<PromptSample>, Vec<CompletionSet>) {
    let samples: Vec<PromptSample> = (0..n)
        .map(|i| PromptSample {
            id: format!("p{i:03}"),
            image_ref: None,
            question: format!("Question {i}?"),
            source: Source::Synthetic,
        })
        .collect();
    let completions = samples
        .iter()
        .map(|s| CompletionSet {
            prompt_id: s.id.clone(),
            completions: vec!["a z".into(), "b".into(), "zz c".into(), "".into()],
            sampler_temperature: 0.7,
            sampler_seed: 1,
        })
        .collect();
    (samples, completions)
}

/// Answers with garbage for every third prompt; counts calls.
struct Garbled {
    inner: MockTransport,
    calls: AtomicUsize,
    garble: bool,
}

impl JudgeTransport for Garbled {
    fn send(&self, item: &JudgeItem<'_>, req: &JudgeRequest) -> Result<JudgeReply, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let idx: usize = item.sample.id[1..].parse().unwrap();
        if self.garble && idx.is_multiple_of(3) {
            return Ok(JudgeReply {
                text: "I cannot rate these.".into(),
            });
        }
        self.inner.send(item, req)
    }
}

fn client(t: Arc<Garbled>) -> JudgeClient {
    JudgeClient::new(
        JudgeClientConfig::default(),
        t,
        Arc::new(FakeClock::default()),
    )
    .unwrap()
}

fn transport(garble: bool) -> Arc<Garbled> {
    Arc::new(Garbled {
        inner: MockTransport {
            rubric: MockRubric::with_target(5, "z"),
        },
        calls: AtomicUsize::new(0),
        garble,
    })
}

#[test]
fn malformed_replies_go_to_rejects_and_stay_skipped() {
    let (samples, completions) = fixture(12);
    let items = join_completions(&samples, &completions).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = AnnotatePaths::beside(&dir.path().join("ann.jsonl"));
    let tpl = JudgePromptTemplate::default();

    let s = annotate(&items, &client(transport(true)), &tpl, &paths, false).unwrap();
    assert_eq!((s.annotated, s.rejected, s.skipped), (8, 4, 0));
    let rejects: Vec<RejectRecord> = jsonl::read(&paths.rejects).unwrap();
    assert_eq!(rejects.len(), 4);
    assert!(rejects
        .iter()
        .all(|r| r.raw_response.as_deref() == Some("I cannot rate these.")));

    // Plain rerun sends nothing.
    let t = transport(false);
    let s = annotate(&items, &client(t.clone()), &tpl, &paths, false).unwrap();
    assert_eq!((s.annotated, s.rejected, s.skipped), (0, 0, 12));
    assert_eq!(t.calls.load(Ordering::SeqCst), 0);

    // Retrying resends only the rejects.
    let t = transport(false);
    let s = annotate(&items, &client(t.clone()), &tpl, &paths, true).unwrap();
    assert_eq!((s.annotated, s.skipped), (4, 8));
    assert_eq!(t.calls.load(Ordering::SeqCst), 4);
    let out: Vec<AnnotationRecord> = jsonl::read(&paths.out).unwrap();
    assert_eq!(out.len(), 12);
    assert!(out.iter().all(|r| r.per_completion_scores.len() == 4));
}

#[test]
fn orphan_completions_are_an_error() {
    let (samples, mut completions) = fixture(3);
    completions[1].prompt_id = "missing".into();
    assert!(join_completions(&samples, &completions).is_err());
}
