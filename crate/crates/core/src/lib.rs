//! Preference-alignment pipeline driven by granular 0-4 judge annotations.
//!
//! Stages: prompt ingestion and mixing ([`ingest`]), completion sampling from
//! a tabular n-gram [`policy`], judge annotation ([`annotator`]), training-set
//! construction ([`pairs`]), DPO/SFT training with exact gradients
//! ([`train`]), and correlation / win-rate / data-scaling analyses
//! ([`analysis`]). [`pipeline`] wires the stages together.

pub mod analysis;
pub mod annotator;
pub mod ingest;
pub mod jsonl;
pub mod pairs;
pub mod par;
pub mod pipeline;
pub mod policy;
pub mod schema;
pub mod synthetic;
pub mod train;

pub use par::Exec;
pub use schema::{
    aggregate_dpo_score, aggregate_rs_score, validate_scores, AnnotationRecord, CompletionSet,
    Metric, PromptSample, QualityScores, Source,
};
