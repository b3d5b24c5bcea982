use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AnnotatorError;
use crate::schema::{CompletionSet, Metric, PromptSample};

/// Judge prompt pieces. Ships as data so the wording can be swapped without
/// touching code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgePromptTemplate {
    pub labeling_guide: String,
    pub cot_preamble: String,
    pub answer_format: String,
}

impl Default for JudgePromptTemplate {
    fn default() -> Self {
        let mut guide = String::from(
            "You are rating candidate answers to a question about an image. \
             Rate every completion with an integer score from 0 to 4 on each metric below.\n",
        );
        for m in Metric::ALL {
            guide.push_str(&format!("- {}: {}\n", m.label(), m.description()));
        }
        Self {
            labeling_guide: guide.trim_end().to_string(),
            cot_preamble: "Let's think step by step. First explain your reasoning about the \
                           strengths and weaknesses of each completion, then give the ratings."
                .into(),
            answer_format:
                "After the reasoning, write exactly one line per completion in this form:\n\
                            Rating for Response N: Helpfulness: h, Correctness: c, Coherence: coh, \
                            Complexity: cx, Verbosity: v"
                    .into(),
        }
    }
}

impl JudgePromptTemplate {
    /// Loads a template from a TOML file with the three fields.
    pub fn load(path: &Path) -> Result<Self, AnnotatorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AnnotatorError::Template(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| AnnotatorError::Template(e.to_string()))
    }
}

/// Renders the single judge call covering all completions of one prompt.
pub fn render_judge_prompt(
    sample: &PromptSample,
    completions: &CompletionSet,
    tpl: &JudgePromptTemplate,
) -> Result<String, AnnotatorError> {
    if completions.prompt_id != sample.id {
        return Err(AnnotatorError::Mismatch(format!(
            "completions for `{}` given with prompt `{}`",
            completions.prompt_id, sample.id
        )));
    }
    if sample.question.trim().is_empty() {
        return Err(AnnotatorError::Mismatch(format!(
            "prompt `{}` has an empty question",
            sample.id
        )));
    }
    let mut out = String::new();
    out.push_str(&tpl.labeling_guide);
    out.push_str("\n\n");
    match &sample.image_ref {
        Some(r) => out.push_str(&format!("[Image: {r}]\n")),
        None => out.push_str("[Image: none]\n"),
    }
    out.push_str(&format!("Question: {}\n\n", sample.question));
    for (i, c) in completions.completions.iter().enumerate() {
        out.push_str(&format!("Completion {}:\n{}\n\n", i + 1, c));
    }
    out.push_str(&tpl.cot_preamble);
    out.push('\n');
    out.push_str(&tpl.answer_format);
    out.push('\n');
    Ok(out)
}
