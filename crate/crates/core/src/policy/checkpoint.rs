use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ContextKey, PolicyError, TinyPolicy, Token, Vocab};

pub const CHECKPOINT_FORMAT: &str = "granalign-tiny-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub context: Vec<Token>,
    pub logits: Vec<f64>,
}

/// JSON checkpoint layout. Rows are sorted by context so equal policies
/// serialize to identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub version: u32,
    pub alphabet: usize,
    pub order: usize,
    pub rows: Vec<CheckpointRow>,
}

impl From<&TinyPolicy> for PolicyCheckpoint {
    fn from(p: &TinyPolicy) -> Self {
        let mut rows: Vec<_> = p.rows().collect();
        rows.sort_by_key(|(k, _)| *k);
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            alphabet: p.vocab().alphabet(),
            order: p.order(),
            rows: rows
                .into_iter()
                .map(|(k, r)| CheckpointRow {
                    context: k.tokens(p.order()),
                    logits: r.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<PolicyCheckpoint> for TinyPolicy {
    type Error = PolicyError;

    fn try_from(c: PolicyCheckpoint) -> Result<Self, PolicyError> {
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        let vocab = Vocab::new(c.alphabet)?;
        let mut rows = HashMap::with_capacity(c.rows.len());
        for r in c.rows {
            if r.context.len() != c.order {
                return Err(PolicyError::Checkpoint(
                    "context length does not match order".into(),
                ));
            }
            rows.insert(ContextKey::from_tokens(&r.context), r.logits);
        }
        TinyPolicy::from_rows(vocab, c.order, rows)
    }
}

impl TinyPolicy {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&PolicyCheckpoint::from(self)).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let c: PolicyCheckpoint =
            serde_json::from_str(text).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        c.try_into()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PolicyError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut p = TinyPolicy::uniform(Vocab::new(3).unwrap(), 2).unwrap();
        p.row_mut(ContextKey::from_tokens(&[4, 1]))[2] = 0.1 + 0.2;
        p.row_mut(ContextKey::from_tokens(&[0, 1]))[0] = -1.0 / 7.0;
        let text = p.to_json();
        let back = TinyPolicy::from_json(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_json(), text);
        assert!(text.contains("\"version\":1"));
    }

    #[test]
    fn rejects_foreign_format() {
        let bad = r#"{"format":"other","version":1,"alphabet":3,"order":1,"rows":[]}"#;
        assert!(TinyPolicy::from_json(bad).is_err());
    }
}
