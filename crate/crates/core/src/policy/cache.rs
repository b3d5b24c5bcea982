use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{SeqLogProb, Token};
use crate::jsonl::{self, JsonlError};

/// Stable hex digest of a response token sequence.
pub fn response_hash(tokens: &[Token]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    let digest = h.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// One persisted cache line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prompt_id: String,
    pub response_hash: String,
    pub sum_logprob: f64,
    pub token_count: usize,
}

/// Frozen reference-policy log-probabilities keyed by (prompt id, response hash).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefLogProbCache {
    map: HashMap<(String, String), SeqLogProb>,
}

impl RefLogProbCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, prompt_id: &str, response: &[Token], value: SeqLogProb) {
        self.map
            .insert((prompt_id.to_string(), response_hash(response)), value);
    }

    pub fn contains(&self, prompt_id: &str, response: &[Token]) -> bool {
        self.get(prompt_id, response).is_some()
    }

    pub fn get(&self, prompt_id: &str, response: &[Token]) -> Option<SeqLogProb> {
        self.map
            .get(&(prompt_id.to_string(), response_hash(response)))
            .copied()
    }

    /// Entries sorted by key.
    pub fn entries(&self) -> Vec<CacheEntry> {
        let mut v: Vec<CacheEntry> = self
            .map
            .iter()
            .map(|((p, h), v)| CacheEntry {
                prompt_id: p.clone(),
                response_hash: h.clone(),
                sum_logprob: v.sum_logprob,
                token_count: v.token_count,
            })
            .collect();
        v.sort_by(|a, b| (&a.prompt_id, &a.response_hash).cmp(&(&b.prompt_id, &b.response_hash)));
        v
    }

    pub fn save(&self, path: &Path) -> Result<(), JsonlError> {
        jsonl::write(path, &self.entries())
    }

    pub fn load(path: &Path) -> Result<Self, JsonlError> {
        let entries: Vec<CacheEntry> = jsonl::read(path)?;
        let map = entries
            .into_iter()
            .map(|e| {
                (
                    (e.prompt_id, e.response_hash),
                    SeqLogProb {
                        sum_logprob: e.sum_logprob,
                        token_count: e.token_count,
                    },
                )
            })
            .collect();
        Ok(Self { map })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persisted_values_are_bit_exact() {
        let mut c = RefLogProbCache::new();
        let vals = [
            -1.0 / 3.0,
            -123.456_789_012_345_68,
            -f64::MIN_POSITIVE,
            -0.1 - 0.2,
        ];
        for (i, v) in vals.iter().enumerate() {
            c.insert(
                &format!("p{i}"),
                &[i as Token, 7],
                SeqLogProb {
                    sum_logprob: *v,
                    token_count: 3,
                },
            );
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        c.save(&path).unwrap();
        let back = RefLogProbCache::load(&path).unwrap();
        for (i, v) in vals.iter().enumerate() {
            let got = back.get(&format!("p{i}"), &[i as Token, 7]).unwrap();
            assert_eq!(got.sum_logprob.to_bits(), v.to_bits());
        }
        assert!(back.get("p0", &[1, 7]).is_none());
    }

    #[test]
    fn hash_distinguishes_sequences() {
        assert_ne!(response_hash(&[1, 2]), response_hash(&[2, 1]));
        assert_ne!(response_hash(&[]), response_hash(&[0]));
        assert_eq!(response_hash(&[5]).len(), 32);
    }
}
