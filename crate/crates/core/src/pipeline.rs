//! End-to-end wiring: prompts → completions → annotations → datasets →
//! DPO → evaluation, with every stage resumable from the files it wrote.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{self, AnalysisError, EvalConfig, SweepRow, SweepSetup};
use crate::annotator::{
    self, AnnotatePaths, AnnotateSummary, AnnotatorError, ClientJudge, HttpTransport, JudgeClient,
    JudgeClientConfig, JudgePromptTemplate, MockRubric, ResponseJudge,
};
use crate::ingest::{self, DatasetManifest, IngestError};
use crate::jsonl::{self, JsonlError};
use crate::pairs::{
    self, format_prompt, BuildStats, GoldAnswer, PairConfig, PairError, SteerTemplate,
};
use crate::policy::{PolicyError, RefLogProbCache, TinyPolicy};
use crate::schema::{AnnotationRecord, CompletionSet, PromptSample};
use crate::synthetic::{self, PlantedConfig};
use crate::train::{self, Dpo, DpoConfig, ScheduleConfig, SftConfig, TrainError, TrainOutputs};
use crate::Exec;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Annotator(#[from] AnnotatorError),
    #[error(transparent)]
    Pairs(#[from] PairError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Prompt mixture; synthetic prompts are generated when absent.
    pub manifest: Option<PathBuf>,
    pub synthetic_prompts: usize,
    pub eval_prompts: usize,
    /// Reference policy checkpoint; built from the planted corpus when absent.
    pub reference: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic_prompts: 200,
            eval_prompts: 1000,
            reference: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub k: usize,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: crate::schema::DEFAULT_COMPLETIONS,
            temperature: 0.7,
            max_len: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    #[default]
    Mock,
    Live,
}

impl std::str::FromStr for JudgeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mock" => Ok(Self::Mock),
            "live" => Ok(Self::Live),
            _ => Err(format!("unknown judge `{s}` (mock|live)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub mode: JudgeMode,
    pub client: JudgeClientConfig,
    /// TOML judge prompt template; the built-in one when absent.
    pub template: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.25, 0.5, 0.75, 1.0],
        }
    }
}

/// One file, one section per stage. Stage seeds are derived from `seed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub judge: JudgeConfig,
    pub planted: PlantedConfig,
    pub pairs: PairConfig,
    pub steer: SteerTemplate,
    pub dpo: DpoConfig,
    pub sft: SftConfig,
    pub schedule: ScheduleConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

/// Stable per-stage seed.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.manifest,
            &mut cfg.data.reference,
            &mut cfg.judge.template,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Copies the master seed into every stage.
    pub fn with_derived_seeds(mut self) -> Self {
        self.pairs.seed = stage_seed(self.seed, "pairs");
        self.dpo.seed = stage_seed(self.seed, "dpo");
        self.sft.seed = stage_seed(self.seed, "sft");
        self.eval.seed = stage_seed(self.seed, "eval");
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.sampler.k == 0 {
            return bad("sampler.k must be >= 1".into());
        }
        if !(self.sampler.temperature.is_finite() && self.sampler.temperature > 0.0)
            || !(self.eval.temperature.is_finite() && self.eval.temperature > 0.0)
        {
            return bad("temperatures must be > 0".into());
        }
        if self.data.manifest.is_none() && self.data.synthetic_prompts == 0 {
            return bad("data.synthetic_prompts must be >= 1 without a manifest".into());
        }
        if self.data.eval_prompts == 0 {
            return bad("data.eval_prompts must be >= 1".into());
        }
        for p in [
            &self.data.manifest,
            &self.data.reference,
            &self.judge.template,
        ]
        .into_iter()
        .flatten()
        {
            if !p.exists() {
                return bad(format!("{} does not exist", p.display()));
            }
        }
        if let Some(&f) = self
            .sweep
            .fractions
            .iter()
            .find(|&&f| !(f > 0.0 && f <= 1.0))
        {
            return bad(format!("sweep fraction {f} outside (0, 1]"));
        }
        self.dpo.validate()?;
        self.sft.validate()?;
        self.judge.client.validate()?;
        Ok(())
    }

    /// Hash of the resolved config; equal fingerprints mean reproducible runs.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let d = Sha256::digest(&canonical);
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Samples `k` completions per prompt. Completion `j` of a prompt uses the
/// prompt's seed plus `j`.
pub fn sample_completions(
    policy: &TinyPolicy,
    prompts: &[PromptSample],
    cfg: &SamplerConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<CompletionSet>, PolicyError> {
    let vocab = policy.vocab();
    exec.try_map(prompts, |p| {
        let prompt = vocab.encode(&format_prompt(&p.question));
        let base = analysis::item_seed(seed, &p.id);
        let completions = (0..cfg.k as u64)
            .map(|j| {
                policy
                    .sample(&prompt, cfg.temperature, base.wrapping_add(j), cfg.max_len)
                    .map(|t| vocab.decode(&t))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CompletionSet {
            prompt_id: p.id.clone(),
            completions,
            sampler_temperature: cfg.temperature,
            sampler_seed: base,
        })
    })
}

/// Output layout of a pipeline run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn prompts(&self) -> PathBuf {
        self.root.join("prompts.jsonl")
    }
    pub fn eval_prompts(&self) -> PathBuf {
        self.root.join("eval_prompts.jsonl")
    }
    pub fn reference(&self) -> PathBuf {
        self.root.join("reference.json")
    }
    pub fn completions(&self) -> PathBuf {
        self.root.join("completions.jsonl")
    }
    pub fn annotations(&self) -> PathBuf {
        self.root.join("annotations.jsonl")
    }
    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

/// Loads `path` if present, otherwise computes, writes and returns it.
fn cached_jsonl<T, F>(path: &Path, make: F) -> Result<Vec<T>, PipelineError>
where
    T: Serialize + serde::de::DeserializeOwned,
    F: FnOnce() -> Result<Vec<T>, PipelineError>,
{
    if path.exists() {
        return Ok(jsonl::read(path)?);
    }
    let items = make()?;
    jsonl::write(path, &items)?;
    Ok(items)
}

pub fn stage_prompts(
    cfg: &PipelineConfig,
    run: &RunDir,
) -> Result<Vec<PromptSample>, PipelineError> {
    cached_jsonl(&run.prompts(), || match &cfg.data.manifest {
        Some(m) => Ok(ingest::load_mixture(&DatasetManifest::load(m)?)?),
        None => Ok(synthetic::synthetic_prompts(
            cfg.data.synthetic_prompts,
            stage_seed(cfg.seed, "prompts"),
            "syn",
        )),
    })
}

pub fn stage_eval_prompts(
    cfg: &PipelineConfig,
    run: &RunDir,
) -> Result<Vec<PromptSample>, PipelineError> {
    cached_jsonl(&run.eval_prompts(), || {
        Ok(synthetic::synthetic_prompts(
            cfg.data.eval_prompts,
            stage_seed(cfg.seed, "eval-prompts"),
            "eval",
        ))
    })
}

pub fn stage_reference(cfg: &PipelineConfig, run: &RunDir) -> Result<TinyPolicy, PipelineError> {
    if let Some(p) = &cfg.data.reference {
        return Ok(TinyPolicy::load(p)?);
    }
    let path = run.reference();
    if path.exists() {
        return Ok(TinyPolicy::load(&path)?);
    }
    let policy = synthetic::reference_policy(&cfg.planted, stage_seed(cfg.seed, "reference"))?;
    policy.save(&path).map_err(|e| io_err(&path, e))?;
    Ok(policy)
}

pub fn stage_completions(
    cfg: &PipelineConfig,
    run: &RunDir,
    reference: &TinyPolicy,
    prompts: &[PromptSample],
    exec: Exec,
) -> Result<Vec<CompletionSet>, PipelineError> {
    cached_jsonl(&run.completions(), || {
        Ok(sample_completions(
            reference,
            prompts,
            &cfg.sampler,
            stage_seed(cfg.seed, "sample"),
            exec,
        )?)
    })
}

pub fn mock_rubric(cfg: &PipelineConfig) -> MockRubric {
    synthetic::planted_rubric(&cfg.planted, stage_seed(cfg.seed, "judge"))
}

pub fn judge_client(cfg: &PipelineConfig) -> Result<JudgeClient, PipelineError> {
    Ok(match cfg.judge.mode {
        JudgeMode::Mock => JudgeClient::mock(mock_rubric(cfg)),
        JudgeMode::Live => {
            let transport = HttpTransport::from_env(&cfg.judge.client)?;
            JudgeClient::with_system_clock(cfg.judge.client.clone(), Arc::new(transport))?
        }
    })
}

pub fn judge_template(cfg: &PipelineConfig) -> Result<JudgePromptTemplate, PipelineError> {
    Ok(match &cfg.judge.template {
        Some(p) => JudgePromptTemplate::load(p)?,
        None => JudgePromptTemplate::default(),
    })
}

/// Annotates what the checkpoint does not cover yet, then returns every
/// annotation on disk.
pub fn stage_annotate(
    cfg: &PipelineConfig,
    run: &RunDir,
    client: &JudgeClient,
    prompts: &[PromptSample],
    completions: &[CompletionSet],
) -> Result<(Vec<AnnotationRecord>, AnnotateSummary), PipelineError> {
    let items = annotator::join_completions(prompts, completions)?;
    let summary = annotator::annotate(
        &items,
        client,
        &judge_template(cfg)?,
        &AnnotatePaths::beside(&run.annotations()),
        false,
    )?;
    Ok((jsonl::read(&run.annotations())?, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub first_pref_acc: Option<f64>,
    pub final_pref_acc: Option<f64>,
    pub skipped_empty: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub fingerprint: String,
    pub annotate: AnnotateReport,
    pub datasets: BuildStats,
    pub train: TrainSummary,
    /// Planted-preference proxy, not a benchmark score.
    pub win_rate: analysis::WinRateReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateReport {
    pub annotations: usize,
    pub rejected_this_run: usize,
}

/// Runs every stage in `run`, reusing whatever earlier runs left there.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    run: &RunDir,
    exec: Exec,
) -> Result<PipelineReport, PipelineError> {
    let cfg = cfg.clone().with_derived_seeds();
    cfg.validate()?;
    std::fs::create_dir_all(&run.root).map_err(|e| io_err(&run.root, e))?;
    let fingerprint = cfg.fingerprint();
    log::info!("run fingerprint {fingerprint}");

    let prompts = stage_prompts(&cfg, run)?;
    let eval_prompts = stage_eval_prompts(&cfg, run)?;
    let reference = stage_reference(&cfg, run)?;
    let completions = stage_completions(&cfg, run, &reference, &prompts, exec)?;
    let client = judge_client(&cfg)?;
    let (annotations, summary) = stage_annotate(&cfg, run, &client, &prompts, &completions)?;

    let gold: Option<Vec<GoldAnswer>> = (cfg.judge.mode == JudgeMode::Mock).then(|| {
        let rubric = mock_rubric(&cfg);
        prompts
            .iter()
            .map(|p| GoldAnswer {
                prompt_id: p.id.clone(),
                answer: annotator::mock_gold_answer(p, &rubric),
            })
            .collect()
    });
    let built = pairs::build_all(
        &prompts,
        &completions,
        &annotations,
        gold.as_deref(),
        &cfg.pairs,
        &cfg.steer,
    )?;
    built.write(&run.datasets())?;

    let train_dir = run.train();
    let examples = pairs::to_dpo_examples(&built.pairs, &reference.vocab(), cfg.dpo.max_len);
    let cache_path = train_dir.join("ref_logprobs.jsonl");
    let mut cache = if cache_path.exists() {
        RefLogProbCache::load(&cache_path)?
    } else {
        RefLogProbCache::new()
    };
    if train::precompute_ref_logprobs(&reference, &examples, &mut cache, exec)? > 0 {
        cache.save(&cache_path)?;
    }
    let mut policy = reference.clone();
    let report = train::train(
        &mut policy,
        &examples,
        &Dpo {
            cache: &cache,
            cfg: &cfg.dpo,
        },
        &cfg.dpo.train_options(),
        &cfg.schedule,
        exec,
        &TrainOutputs {
            metrics_path: Some(train_dir.join("metrics.jsonl")),
            checkpoint_dir: Some(train_dir.join("checkpoints")),
            log_every: 100,
            checkpoint_every: 0,
        },
    )?;
    let policy_path = train_dir.join("policy.json");
    policy
        .save(&policy_path)
        .map_err(|e| io_err(&policy_path, e))?;

    let judge = eval_judge(&cfg, &client)?;
    let wr = analysis::win_rate(
        &policy,
        &reference,
        &eval_prompts,
        judge.as_judge(),
        &cfg.eval,
        exec,
    )?;

    let out = PipelineReport {
        fingerprint,
        annotate: AnnotateReport {
            annotations: annotations.len(),
            rejected_this_run: summary.rejected,
        },
        datasets: built.stats,
        train: TrainSummary {
            steps: report.metrics.len(),
            final_loss: report.final_loss().unwrap_or(f64::NAN),
            first_pref_acc: report.metrics.first().and_then(|m| m.pref_acc),
            final_pref_acc: report.recent_pref_acc(10),
            skipped_empty: report.skipped_empty,
        },
        win_rate: wr,
    };
    write_json(&run.report(), &out)?;
    Ok(out)
}

/// Either the rubric itself or a live client wrapper.
pub enum EvalJudge<'a> {
    Mock(MockRubric),
    Live(ClientJudge<'a>),
}

impl EvalJudge<'_> {
    pub fn as_judge(&self) -> &dyn ResponseJudge {
        match self {
            EvalJudge::Mock(r) => r,
            EvalJudge::Live(c) => c,
        }
    }
}

pub fn eval_judge<'a>(
    cfg: &PipelineConfig,
    client: &'a JudgeClient,
) -> Result<EvalJudge<'a>, PipelineError> {
    Ok(match cfg.judge.mode {
        JudgeMode::Mock => EvalJudge::Mock(mock_rubric(cfg)),
        JudgeMode::Live => EvalJudge::Live(ClientJudge {
            client,
            template: judge_template(cfg)?,
        }),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Data-scaling sweep over `cfg.sweep.fractions`; writes `sweep.csv` and
/// `sweep.json` into the run directory.
pub fn run_sweep(
    cfg: &PipelineConfig,
    run: &RunDir,
    exec: Exec,
) -> Result<Vec<SweepRow>, PipelineError> {
    let cfg = cfg.clone().with_derived_seeds();
    cfg.validate()?;
    std::fs::create_dir_all(&run.root).map_err(|e| io_err(&run.root, e))?;
    log::info!("run fingerprint {}", cfg.fingerprint());
    let prompts = stage_prompts(&cfg, run)?;
    let eval_prompts = stage_eval_prompts(&cfg, run)?;
    let reference = stage_reference(&cfg, run)?;
    let completions = stage_completions(&cfg, run, &reference, &prompts, exec)?;
    let client = judge_client(&cfg)?;
    let (annotations, _) = stage_annotate(&cfg, run, &client, &prompts, &completions)?;
    let (annotated, _) =
        pairs::align(&prompts, &completions, &annotations).map_err(PairError::from)?;
    let judge = eval_judge(&cfg, &client)?;
    let rows = analysis::scaling_sweep(
        &cfg.sweep.fractions,
        &SweepSetup {
            prompts: &annotated,
            pair_cfg: &cfg.pairs,
            dpo: &cfg.dpo,
            schedule: &cfg.schedule,
            reference: &reference,
            eval_prompts: &eval_prompts,
            judge: judge.as_judge(),
            eval: &cfg.eval,
            subset_seed: stage_seed(cfg.seed, "subset"),
        },
        exec,
    )?;
    analysis::write_sweep(&rows, &run.root, "sweep")?;
    Ok(rows)
}
