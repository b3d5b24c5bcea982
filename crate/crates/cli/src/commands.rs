use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use granalign::analysis::{self, NoiseKind, PreferenceRecord};
use granalign::annotator::{self, AnnotatePaths, JudgeClient};
use granalign::ingest::{self, DatasetManifest};
use granalign::jsonl;
use granalign::pairs::{
    self, GoldAnswer, MarginDirection, PreferencePair, SftRecord, SteerLmExample,
};
use granalign::pipeline::{self, stage_seed, JudgeMode, PipelineConfig, RunDir};
use granalign::policy::{RefLogProbCache, TinyPolicy};
use granalign::schema::{CompletionSet, PromptSample};
use granalign::synthetic;
use granalign::train::{self, Dpo, OptimizerKind, Sft, TrainOutputs};
use granalign::Exec;

use crate::{AnalyzeCommand, Cli, Command, OptimArgs, WinrateArgs};

pub fn name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Ingest(_) => "ingest",
        Command::Sample(_) => "sample",
        Command::Annotate(_) => "annotate",
        Command::Build(_) => "build",
        Command::TrainDpo(_) => "train-dpo",
        Command::TrainSft(_) => "train-sft",
        Command::Analyze(_) => "analyze",
        Command::Sweep(_) => "sweep",
        Command::Eval(_) => "eval",
        Command::Run(_) => "run",
    }
}

/// File config (or defaults), then env/flag overrides.
fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn set_judge(cfg: &mut PipelineConfig, judge: &Option<String>) -> Result<()> {
    if let Some(j) = judge {
        cfg.judge.mode = j.parse::<JudgeMode>().map_err(anyhow::Error::msg)?;
    }
    Ok(())
}

fn require(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            bail!("input {} does not exist", p.display());
        }
    }
    Ok(())
}

fn emit(summary: Value) {
    println!("{summary}");
}

fn optimizer(name: &str) -> Result<OptimizerKind> {
    match name {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::adam()),
        other => bail!("unknown optimizer `{other}` (sgd|adam)"),
    }
}

fn load_policy(path: Option<&PathBuf>, cfg: &PipelineConfig) -> Result<TinyPolicy> {
    match path {
        Some(p) => TinyPolicy::load(p).with_context(|| format!("loading policy {}", p.display())),
        None => Ok(synthetic::reference_policy(
            &cfg.planted,
            stage_seed(cfg.seed, "reference"),
        )?),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let mut cfg = load_config(cli)?;
    let cmd = name(&cli.command);

    // Apply command-specific overrides before fingerprinting.
    match &cli.command {
        Command::Sample(a) => {
            if let Some(k) = a.k {
                cfg.sampler.k = k;
            }
            if let Some(t) = a.temperature {
                cfg.sampler.temperature = t;
            }
            if let Some(m) = a.max_len {
                cfg.sampler.max_len = m;
            }
        }
        Command::Annotate(a) if a.mock => cfg.judge.mode = JudgeMode::Mock,
        Command::Build(a) => {
            if let Some(m) = a.min_margin {
                cfg.pairs.min_margin = m;
            }
            if let Some(d) = &a.margin_direction {
                cfg.pairs.margin_direction =
                    d.parse::<MarginDirection>().map_err(anyhow::Error::msg)?;
            }
        }
        Command::TrainDpo(a) => {
            if let Some(b) = a.beta {
                cfg.dpo.beta = b;
            }
            if a.average {
                cfg.dpo.use_average_logprob = true;
            }
            apply_optim(
                &a.optim,
                &mut cfg.dpo.learning_rate,
                &mut cfg.dpo.epochs,
                &mut cfg.dpo.batch_size,
                &mut cfg.dpo.grad_accum_steps,
                &mut cfg.dpo.max_len,
                &mut cfg.dpo.optimizer,
            )?;
        }
        Command::TrainSft(a) => {
            apply_optim(
                &a.optim,
                &mut cfg.sft.learning_rate,
                &mut cfg.sft.epochs,
                &mut cfg.sft.batch_size,
                &mut cfg.sft.grad_accum_steps,
                &mut cfg.sft.max_len,
                &mut cfg.sft.optimizer,
            )?;
        }
        Command::Sweep(a) | Command::Analyze(AnalyzeCommand::Sweep(a)) => {
            if let Some(f) = &a.fractions {
                cfg.sweep.fractions = f.clone();
            }
            set_judge(&mut cfg, &a.judge)?;
        }
        Command::Analyze(AnalyzeCommand::Winrate(a)) => set_judge(&mut cfg, &a.judge)?,
        Command::Analyze(AnalyzeCommand::Noisy(a)) => set_judge(&mut cfg, &a.base.judge)?,
        Command::Eval(a) => set_judge(&mut cfg, &a.judge)?,
        Command::Run(a) => set_judge(&mut cfg, &a.judge)?,
        _ => {}
    }
    let cfg = cfg.with_derived_seeds();
    cfg.validate()?;
    let fingerprint = cfg.fingerprint();
    log::info!("{cmd}: run fingerprint {fingerprint}");

    if cli.dry_run {
        check_inputs(&cli.command)?;
        emit(json!({ "command": cmd, "dry_run": true, "fingerprint": fingerprint }));
        return Ok(());
    }

    let mut summary = match &cli.command {
        Command::Ingest(a) => {
            let mut manifest = DatasetManifest::load(&a.manifest)?;
            if let Some(seed) = cli.seed {
                manifest.seed = seed;
            }
            let mut prompts = ingest::load_mixture(&manifest)?;
            if let Some(f) = a.fraction {
                prompts = ingest::take_fraction(&prompts, f, manifest.seed)?;
            }
            jsonl::write(&a.out, &prompts)?;
            json!({ "prompts": prompts.len(), "out": a.out })
        }
        Command::Sample(a) => {
            let prompts: Vec<PromptSample> = jsonl::read(&a.prompts)?;
            let policy = load_policy(a.policy.as_ref(), &cfg)?;
            let sets = pipeline::sample_completions(
                &policy,
                &prompts,
                &cfg.sampler,
                stage_seed(cfg.seed, "sample"),
                exec,
            )?;
            jsonl::write(&a.out, &sets)?;
            json!({ "prompts": sets.len(), "k": cfg.sampler.k, "out": a.out })
        }
        Command::Annotate(a) => {
            let prompts: Vec<PromptSample> = jsonl::read(&a.input)?;
            let completions: Vec<CompletionSet> = jsonl::read(&a.completions)?;
            let client = pipeline::judge_client(&cfg)?;
            let items = annotator::join_completions(&prompts, &completions)?;
            let paths = AnnotatePaths::beside(&a.out);
            let s = annotator::annotate(
                &items,
                &client,
                &pipeline::judge_template(&cfg)?,
                &paths,
                a.retry_rejects,
            )?;
            json!({ "annotated": s.annotated, "rejected": s.rejected, "skipped": s.skipped,
                    "out": a.out, "rejects": paths.rejects })
        }
        Command::Build(a) => {
            let prompts: Vec<PromptSample> = jsonl::read(&a.prompts)?;
            let completions: Vec<CompletionSet> = jsonl::read(&a.completions)?;
            let annotations = jsonl::read(&a.annotations)?;
            let gold: Option<Vec<GoldAnswer>> = a.gold.as_deref().map(jsonl::read).transpose()?;
            let built = pairs::build_all(
                &prompts,
                &completions,
                &annotations,
                gold.as_deref(),
                &cfg.pairs,
                &cfg.steer,
            )?;
            built.write(&a.out_dir)?;
            json!({ "stats": built.stats, "out_dir": a.out_dir })
        }
        Command::TrainDpo(a) => {
            let pairs: Vec<PreferencePair> = jsonl::read(&a.pairs)?;
            let reference = load_policy(a.reference.as_ref(), &cfg)?;
            let examples = pairs::to_dpo_examples(&pairs, &reference.vocab(), cfg.dpo.max_len);
            let cache_path = a.out_dir.join("ref_logprobs.jsonl");
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
                &train_outputs(&a.out_dir),
            )?;
            let out = a.out_dir.join("policy.json");
            policy
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            json!({ "steps": report.metrics.len(), "final_loss": report.final_loss(),
                    "pref_acc": report.recent_pref_acc(10), "policy": out })
        }
        Command::TrainSft(a) => {
            let init = load_policy(a.init.as_ref(), &cfg)?;
            let vocab = init.vocab();
            let examples = if a.steerlm {
                let ex: Vec<SteerLmExample> = jsonl::read(&a.data)?;
                pairs::steerlm_to_sft(&ex, &vocab, cfg.sft.max_len)
            } else {
                let ex: Vec<SftRecord> = jsonl::read(&a.data)?;
                pairs::to_sft_examples(&ex, &vocab, cfg.sft.max_len)
            };
            let mut policy = init;
            let report = train::train(
                &mut policy,
                &examples,
                &Sft,
                &cfg.sft.train_options(),
                &cfg.schedule,
                exec,
                &train_outputs(&a.out_dir),
            )?;
            let out = a.out_dir.join("policy.json");
            policy
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            json!({ "steps": report.metrics.len(), "final_loss": report.final_loss(),
                    "skipped_empty": report.skipped_empty, "policy": out })
        }
        Command::Analyze(AnalyzeCommand::Correlate(a)) => {
            let records: Vec<PreferenceRecord> = jsonl::read(&a.input)?;
            let report = analysis::preference_correlation(&records)?;
            pipeline::write_json(&a.out_dir.join("correlation.json"), &report)?;
            std::fs::write(a.out_dir.join("correlation.csv"), report.to_csv())?;
            json!({ "n": report.n, "preference_column": report.matrix.iter().map(|r| r[5]).collect::<Vec<_>>(),
                    "out_dir": a.out_dir })
        }
        Command::Analyze(AnalyzeCommand::Winrate(a)) => winrate(a, &cfg, exec, None)?,
        Command::Analyze(AnalyzeCommand::Noisy(a)) => {
            let kind: NoiseKind = a.noise.parse().map_err(anyhow::Error::msg)?;
            winrate(&a.base, &cfg, exec, Some(kind))?
        }
        Command::Sweep(a) | Command::Analyze(AnalyzeCommand::Sweep(a)) => {
            let rows = pipeline::run_sweep(&cfg, &RunDir::new(&a.out_dir), exec)?;
            json!({ "rows": rows, "csv": a.out_dir.join("sweep.csv") })
        }
        Command::Eval(a) => {
            let (policy, reference, prompts, client) =
                eval_inputs(&a.policy, a.reference.as_ref(), &a.prompts, &cfg)?;
            let judge = pipeline::eval_judge(&cfg, &client)?;
            let wr = analysis::win_rate(
                &policy,
                &reference,
                &prompts,
                judge.as_judge(),
                &cfg.eval,
                exec,
            )?;
            let blank = analysis::noisy_context_eval(
                &policy,
                &reference,
                &prompts,
                NoiseKind::Blank,
                judge.as_judge(),
                &cfg.eval,
                exec,
            )?;
            let random = analysis::noisy_context_eval(
                &policy,
                &reference,
                &prompts,
                NoiseKind::Random,
                judge.as_judge(),
                &cfg.eval,
                exec,
            )?;
            let report = json!({ "win_rate": wr, "noisy_blank": blank, "noisy_random": random });
            if let Some(out) = &a.out {
                pipeline::write_json(out, &report)?;
            }
            report
        }
        Command::Run(a) => {
            let report = pipeline::run_pipeline(&cfg, &RunDir::new(&a.out_dir), exec)?;
            json!({ "report": report, "out_dir": a.out_dir })
        }
    };
    if let Value::Object(m) = &mut summary {
        m.insert("command".into(), json!(cmd));
        m.insert("fingerprint".into(), json!(fingerprint));
    }
    emit(summary);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn apply_optim(
    a: &OptimArgs,
    lr: &mut f64,
    epochs: &mut usize,
    batch: &mut usize,
    accum: &mut usize,
    max_len: &mut usize,
    opt: &mut OptimizerKind,
) -> Result<()> {
    if let Some(v) = a.lr {
        *lr = v;
    }
    if let Some(v) = a.epochs {
        *epochs = v;
    }
    if let Some(v) = a.batch_size {
        *batch = v;
    }
    if let Some(v) = a.grad_accum {
        *accum = v;
    }
    if let Some(v) = a.max_len {
        *max_len = v;
    }
    if let Some(v) = &a.optimizer {
        *opt = optimizer(v)?;
    }
    Ok(())
}

fn train_outputs(dir: &Path) -> TrainOutputs {
    TrainOutputs {
        metrics_path: Some(dir.join("metrics.jsonl")),
        checkpoint_dir: Some(dir.join("checkpoints")),
        log_every: 1,
        checkpoint_every: 0,
    }
}

fn eval_inputs(
    policy: &Path,
    reference: Option<&PathBuf>,
    prompts: &Path,
    cfg: &PipelineConfig,
) -> Result<(TinyPolicy, TinyPolicy, Vec<PromptSample>, JudgeClient)> {
    let candidate =
        TinyPolicy::load(policy).with_context(|| format!("loading {}", policy.display()))?;
    let reference = load_policy(reference, cfg)?;
    let prompts: Vec<PromptSample> = jsonl::read(prompts)?;
    Ok((candidate, reference, prompts, pipeline::judge_client(cfg)?))
}

fn winrate(
    a: &WinrateArgs,
    cfg: &PipelineConfig,
    exec: Exec,
    noise: Option<NoiseKind>,
) -> Result<Value> {
    let (policy, reference, prompts, client) =
        eval_inputs(&a.policy, a.reference.as_ref(), &a.prompts, cfg)?;
    let judge = pipeline::eval_judge(cfg, &client)?;
    let report = match noise {
        None => serde_json::to_value(analysis::win_rate(
            &policy,
            &reference,
            &prompts,
            judge.as_judge(),
            &cfg.eval,
            exec,
        )?)?,
        Some(kind) => serde_json::to_value(analysis::noisy_context_eval(
            &policy,
            &reference,
            &prompts,
            kind,
            judge.as_judge(),
            &cfg.eval,
            exec,
        )?)?,
    };
    if let Some(out) = &a.out {
        pipeline::write_json(out, &report)?;
    }
    Ok(json!({ "report": report }))
}

fn check_inputs(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Ingest(a) => require(&[&a.manifest]),
        Command::Sample(a) => require(&[&a.prompts]),
        Command::Annotate(a) => require(&[&a.input, &a.completions]),
        Command::Build(a) => require(&[&a.prompts, &a.completions, &a.annotations]),
        Command::TrainDpo(a) => require(&[&a.pairs]),
        Command::TrainSft(a) => require(&[&a.data]),
        Command::Analyze(AnalyzeCommand::Correlate(a)) => require(&[&a.input]),
        Command::Analyze(AnalyzeCommand::Winrate(a)) => require(&[&a.policy, &a.prompts]),
        Command::Analyze(AnalyzeCommand::Noisy(a)) => require(&[&a.base.policy, &a.base.prompts]),
        Command::Eval(a) => require(&[&a.policy, &a.prompts]),
        Command::Sweep(_) | Command::Analyze(AnalyzeCommand::Sweep(_)) | Command::Run(_) => Ok(()),
    }
}
