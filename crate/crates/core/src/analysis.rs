//! Correlation between annotation differences and preferences, judged
//! win-rate of a policy against the reference, and data-scaling sweeps.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotator::ResponseJudge;
use crate::ingest::{self, IngestError};
use crate::pairs::{build_dpo_pairs, format_prompt, to_dpo_examples, AnnotatedPrompt, PairConfig};
use crate::policy::{RefLogProbCache, TinyPolicy};
use crate::schema::{Metric, PromptSample, QualityScores};
use crate::train::{
    self, precompute_ref_logprobs, Dpo, DpoConfig, ScheduleConfig, TrainError, TrainOutputs,
};
use crate::Exec;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("series has fewer than two points or zero variance")]
    DegenerateSeries,
    #[error("no prompts to evaluate")]
    NoPrompts,
    #[error("every evaluation item failed")]
    AllRejected,
    #[error("fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("io: {0}")]
    Io(String),
}

/// Product-moment correlation, accumulated in one pass with Welford
/// co-moment updates.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(AnalysisError::DegenerateSeries);
    }
    let (mut mx, mut my) = (0.0, 0.0);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (i, (&a, &b)) in x.iter().zip(y).enumerate() {
        let n = (i + 1) as f64;
        let dx = a - mx;
        let dy = b - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (a - mx);
        syy += dy * (b - my);
        sxy += dx * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(AnalysisError::DegenerateSeries);
    }
    // sqrt of the product (not a product of sqrts) keeps r(x, ±x) exactly ±1.
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Two completions' scores and an external verdict on which is better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub a: QualityScores,
    pub b: QualityScores,
    pub prefers_a: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub variables: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub n: usize,
}

impl CorrelationReport {
    /// r between `metric`'s difference and the preference label.
    pub fn with_preference(&self, metric: Metric) -> f64 {
        self.matrix[metric.index()][5]
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(",{}\n", self.variables.join(","));
        for (name, row) in self.variables.iter().zip(&self.matrix) {
            let cells: Vec<String> = row.iter().map(|r| format!("{r:.6}")).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }
}

/// Pearson matrix over the five metric differences (a − b) and the
/// preference coded +1 (a) / −1 (b).
pub fn preference_correlation(
    records: &[PreferenceRecord],
) -> Result<CorrelationReport, AnalysisError> {
    let mut series: Vec<Vec<f64>> = (0..6).map(|_| Vec::with_capacity(records.len())).collect();
    for r in records {
        for m in Metric::ALL {
            series[m.index()].push(r.a.get(m) as f64 - r.b.get(m) as f64);
        }
        series[5].push(if r.prefers_a { 1.0 } else { -1.0 });
    }
    let mut matrix = vec![vec![1.0; 6]; 6];
    for i in 0..6 {
        for j in i + 1..6 {
            let r = pearson(&series[i], &series[j])?;
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }
    // Catches a constant series even when nothing else was paired with it.
    for s in &series {
        pearson(s, s)?;
    }
    let mut variables: Vec<String> = Metric::ALL
        .iter()
        .map(|m| format!("delta_{}", m.name()))
        .collect();
    variables.push("preference".into());
    Ok(CorrelationReport {
        variables,
        matrix,
        n: records.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            temperature: 0.7,
            max_len: 64,
        }
    }
}

/// Sampling seed for one prompt; both models use it, so identical models
/// give identical responses.
pub fn item_seed(seed: u64, prompt_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(prompt_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReject {
    pub prompt_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateReport {
    pub win_rate: f64,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub rejects: Vec<EvalReject>,
}

impl WinRateReport {
    pub fn judged(&self) -> usize {
        self.wins + self.ties + self.losses
    }
}

enum Outcome {
    Win,
    Tie,
    Loss,
}

/// Samples one response per prompt from each model (shared per-prompt seed),
/// scores both with the judge and counts the candidate's strict wins, ties
/// as half. Judge failures are collected per item.
pub fn win_rate(
    candidate: &TinyPolicy,
    reference: &TinyPolicy,
    prompts: &[PromptSample],
    judge: &dyn ResponseJudge,
    cfg: &EvalConfig,
    exec: Exec,
) -> Result<WinRateReport, AnalysisError> {
    if prompts.is_empty() {
        return Err(AnalysisError::NoPrompts);
    }
    let vocab = candidate.vocab();
    let results = exec.map(prompts, |p| -> Result<Outcome, String> {
        let prompt = vocab.encode(&format_prompt(&p.question));
        let seed = item_seed(cfg.seed, &p.id);
        let a = candidate
            .sample(&prompt, cfg.temperature, seed, cfg.max_len)
            .map_err(|e| e.to_string())?;
        let b = reference
            .sample(&prompt, cfg.temperature, seed, cfg.max_len)
            .map_err(|e| e.to_string())?;
        let scores = judge.score(p, &[vocab.decode(&a), vocab.decode(&b)])?;
        let [sa, sb] = scores[..] else {
            return Err(format!(
                "judge returned {} scores for 2 responses",
                scores.len()
            ));
        };
        Ok(match sa.rs_score().cmp(&sb.rs_score()) {
            std::cmp::Ordering::Greater => Outcome::Win,
            std::cmp::Ordering::Equal => Outcome::Tie,
            std::cmp::Ordering::Less => Outcome::Loss,
        })
    });
    let mut report = WinRateReport {
        win_rate: 0.0,
        wins: 0,
        ties: 0,
        losses: 0,
        rejects: Vec::new(),
    };
    for (p, r) in prompts.iter().zip(results) {
        match r {
            Ok(Outcome::Win) => report.wins += 1,
            Ok(Outcome::Tie) => report.ties += 1,
            Ok(Outcome::Loss) => report.losses += 1,
            Err(reason) => report.rejects.push(EvalReject {
                prompt_id: p.id.clone(),
                reason,
            }),
        }
    }
    let n = report.judged();
    if n == 0 {
        return Err(AnalysisError::AllRejected);
    }
    report.win_rate = (report.wins as f64 + 0.5 * report.ties as f64) / n as f64;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Blank,
    Random,
}

impl std::str::FromStr for NoiseKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "blank" => Ok(Self::Blank),
            "random" => Ok(Self::Random),
            _ => Err(format!("unknown noise kind `{s}` (blank|random)")),
        }
    }
}

/// Prepends a context block carrying no information about the question.
pub fn add_noise(sample: &PromptSample, kind: NoiseKind, seed: u64) -> PromptSample {
    let block = match kind {
        NoiseKind::Blank => "[context]\n[/context]\n".to_string(),
        NoiseKind::Random => {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(sample.id.as_bytes());
            let noise: String = h
                .finalize()
                .iter()
                .map(|b| (b'!' + b % 94) as char)
                .collect();
            format!("[context]\n{noise}\n[/context]\n")
        }
    };
    PromptSample {
        question: format!("{block}{}", sample.question),
        ..sample.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyReport {
    /// Text-noise analog of a non-informative image context.
    pub kind: NoiseKind,
    pub clean: f64,
    pub noisy: f64,
    pub robustness_gap: f64,
}

/// Win-rate with and without a non-informative context block; both models
/// see the same noise.
pub fn noisy_context_eval(
    candidate: &TinyPolicy,
    reference: &TinyPolicy,
    prompts: &[PromptSample],
    kind: NoiseKind,
    judge: &dyn ResponseJudge,
    cfg: &EvalConfig,
    exec: Exec,
) -> Result<NoisyReport, AnalysisError> {
    let clean = win_rate(candidate, reference, prompts, judge, cfg, exec)?.win_rate;
    let noisy_prompts: Vec<PromptSample> = prompts
        .iter()
        .map(|p| add_noise(p, kind, cfg.seed))
        .collect();
    let noisy = win_rate(candidate, reference, &noisy_prompts, judge, cfg, exec)?.win_rate;
    Ok(NoisyReport {
        kind,
        clean,
        noisy,
        robustness_gap: clean - noisy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub prompts: usize,
    pub pairs: usize,
    pub win_rate: f64,
    pub final_loss: f64,
    pub pref_acc: Option<f64>,
}

/// Everything a sweep point needs besides its fraction.
pub struct SweepSetup<'a> {
    /// Annotated training prompts, in ingest order.
    pub prompts: &'a [AnnotatedPrompt<'a>],
    pub pair_cfg: &'a PairConfig,
    pub dpo: &'a DpoConfig,
    pub schedule: &'a ScheduleConfig,
    /// Frozen reference; also the starting point of every run.
    pub reference: &'a TinyPolicy,
    pub eval_prompts: &'a [PromptSample],
    pub judge: &'a dyn ResponseJudge,
    pub eval: &'a EvalConfig,
    /// Seeds the nested subset permutation.
    pub subset_seed: u64,
}

/// Trains one DPO policy per fraction on nested prompt subsets and judges
/// each against the reference.
pub fn scaling_sweep(
    fractions: &[f64],
    setup: &SweepSetup<'_>,
    exec: Exec,
) -> Result<Vec<SweepRow>, AnalysisError> {
    if let Some(&f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(AnalysisError::BadFraction(f));
    }
    let mut cache = RefLogProbCache::new();
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let subset = ingest::take_fraction(setup.prompts, fraction, setup.subset_seed)?;
        let (pairs, _) = build_dpo_pairs(&subset, setup.pair_cfg);
        let (policy, report) = train_dpo_from_pairs(
            setup.reference,
            &pairs,
            setup.dpo,
            setup.schedule,
            &mut cache,
            exec,
        )?;
        let wr = win_rate(
            &policy,
            setup.reference,
            setup.eval_prompts,
            setup.judge,
            setup.eval,
            exec,
        )?;
        rows.push(SweepRow {
            fraction,
            prompts: subset.len(),
            pairs: pairs.len(),
            win_rate: wr.win_rate,
            final_loss: report.final_loss().unwrap_or(f64::NAN),
            pref_acc: report.recent_pref_acc(10),
        });
    }
    Ok(rows)
}

/// Starts from the reference, fills `cache` as needed and runs DPO.
pub fn train_dpo_from_pairs(
    reference: &TinyPolicy,
    pairs: &[crate::pairs::PreferencePair],
    cfg: &DpoConfig,
    schedule: &ScheduleConfig,
    cache: &mut RefLogProbCache,
    exec: Exec,
) -> Result<(TinyPolicy, train::TrainReport), TrainError> {
    cfg.validate()?;
    let examples = to_dpo_examples(pairs, &reference.vocab(), cfg.max_len);
    precompute_ref_logprobs(reference, &examples, cache, exec)?;
    let mut policy = reference.clone();
    let report = train::train(
        &mut policy,
        &examples,
        &Dpo { cache, cfg },
        &cfg.train_options(),
        schedule,
        exec,
        &TrainOutputs::default(),
    )?;
    Ok((policy, report))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("fraction,prompts,pairs,win_rate,final_loss,pref_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{}\n",
            r.fraction,
            r.prompts,
            r.pairs,
            r.win_rate,
            r.final_loss,
            r.pref_acc.map(|a| format!("{a:.6}")).unwrap_or_default()
        ));
    }
    out
}

/// Writes `<stem>.csv` and `<stem>.json` (plot-ready series).
pub fn write_sweep(rows: &[SweepRow], dir: &Path, stem: &str) -> Result<(), AnalysisError> {
    std::fs::create_dir_all(dir).map_err(|e| AnalysisError::Io(e.to_string()))?;
    let json = serde_json::json!({
        "metric": "win_rate vs reference (planted-preference proxy)",
        "x": rows.iter().map(|r| r.fraction).collect::<Vec<_>>(),
        "y": rows.iter().map(|r| r.win_rate).collect::<Vec<_>>(),
        "rows": rows,
    });
    std::fs::write(dir.join(format!("{stem}.csv")), sweep_csv(rows))
        .map_err(|e| AnalysisError::Io(e.to_string()))?;
    std::fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&json).expect("sweep json") + "\n",
    )
    .map_err(|e| AnalysisError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_pass(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn pearson_basics() {
        let x = [1.0, 2.0, 4.0, 7.0, 11.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(pearson(&x, &x).unwrap(), 1.0);
        assert_eq!(pearson(&x, &neg).unwrap(), -1.0);
        let y = [2.0, 1.0, 5.0, 3.0, 8.0];
        assert!((pearson(&x, &y).unwrap() - two_pass(&x, &y)).abs() < 1e-12);
        assert!(matches!(
            pearson(&x, &y[..3]),
            Err(AnalysisError::LengthMismatch(5, 3))
        ));
        assert!(matches!(
            pearson(&[1.0], &[2.0]),
            Err(AnalysisError::DegenerateSeries)
        ));
        assert!(matches!(
            pearson(&[1.0, 1.0], &[2.0, 3.0]),
            Err(AnalysisError::DegenerateSeries)
        ));
    }

    #[test]
    fn pearson_scale_invariance() {
        let x = [0.3, -1.2, 4.4, 2.0, 0.0, 9.5];
        let y = [1.0, 0.5, 2.5, 2.0, 1.0, 3.0];
        let r = pearson(&x, &y).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| -3.0 * v + 7.0).collect();
        assert!((pearson(&shifted, &y).unwrap() + r).abs() < 1e-12);
        assert!((pearson(&y, &x).unwrap() - r).abs() < 1e-15);
    }

    #[test]
    fn noise_is_deterministic() {
        let p = PromptSample {
            id: "x".into(),
            image_ref: None,
            question: "q".into(),
            source: crate::schema::Source::Synthetic,
        };
        assert_eq!(
            add_noise(&p, NoiseKind::Random, 3),
            add_noise(&p, NoiseKind::Random, 3)
        );
        assert_ne!(
            add_noise(&p, NoiseKind::Random, 3),
            add_noise(&p, NoiseKind::Random, 4)
        );
        assert!(add_noise(&p, NoiseKind::Blank, 0).question.ends_with("\nq"));
    }
}
