//! Prompt-source mixing, deterministic shuffling and nested fractional subsets.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::schema::{PromptSample, Source};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: declared {declared} records, found {actual}")]
    CountMismatch {
        path: PathBuf,
        declared: usize,
        actual: usize,
    },
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate prompt id `{0}`")]
    DuplicateId(String),
    #[error("empty question for prompt `{0}`")]
    EmptyQuestion(String),
    #[error("fraction {0} is outside (0, 1]")]
    BadFraction(f64),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error(transparent)]
    Io(JsonlError),
}

impl From<JsonlError> for IngestError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Parse {
                path,
                line,
                message,
            } => IngestError::Parse {
                path,
                line,
                message,
            },
            other => IngestError::Io(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source: Source,
    pub path: PathBuf,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetManifest {
    /// Loads a TOML manifest. Relative entry paths are resolved against the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|e| IngestError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut m: DatasetManifest = toml::from_str(&text).map_err(|e| IngestError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut m.entries {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        Ok(m)
    }

    pub fn declared_total(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }
}

/// Concatenates every manifest entry, checks declared counts and id
/// uniqueness, then shuffles with the manifest seed.
///
/// Each record's `source` is set to its entry's tag.
pub fn load_mixture(manifest: &DatasetManifest) -> Result<Vec<PromptSample>, IngestError> {
    let mut all = Vec::with_capacity(manifest.declared_total());
    let mut seen = HashSet::new();
    for entry in &manifest.entries {
        let records: Vec<PromptSample> = jsonl::read(&entry.path)?;
        if records.len() != entry.count {
            return Err(IngestError::CountMismatch {
                path: entry.path.clone(),
                declared: entry.count,
                actual: records.len(),
            });
        }
        for mut r in records {
            if r.question.trim().is_empty() {
                return Err(IngestError::EmptyQuestion(r.id));
            }
            if !seen.insert(r.id.clone()) {
                return Err(IngestError::DuplicateId(r.id));
            }
            r.source = entry.source;
            all.push(r);
        }
    }
    shuffle(&mut all, manifest.seed);
    Ok(all)
}

/// Seeded Fisher-Yates shuffle.
pub fn shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
}

/// Number of samples kept for `fraction` of `n`.
pub fn fraction_len(n: usize, fraction: f64) -> Result<usize, IngestError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(IngestError::BadFraction(fraction));
    }
    // Guard against 0.29 * 100 == 28.999...
    Ok(((fraction * n as f64) + 1e-9).floor() as usize)
}

/// A `fraction` prefix of the seed-shuffled order. For a fixed seed, smaller
/// fractions are always subsets of larger ones.
pub fn take_fraction<T: Clone>(
    samples: &[T],
    fraction: f64,
    seed: u64,
) -> Result<Vec<T>, IngestError> {
    let keep = fraction_len(samples.len(), fraction)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    shuffle(&mut order, seed);
    Ok(order[..keep].iter().map(|&i| samples[i].clone()).collect())
}
