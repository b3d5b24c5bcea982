mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Granular-annotation preference alignment pipeline.
#[derive(Debug, Parser)]
#[command(name = "granalign", version, about)]
pub struct Cli {
    /// Pipeline config (TOML, one section per stage).
    #[arg(long, global = true, env = "GRANALIGN_CONFIG")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true, env = "GRANALIGN_SEED")]
    pub seed: Option<u64>,
    /// Validate config and inputs, then exit without running.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Run single-threaded.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a prompt mixture manifest into one shuffled JSONL file.
    Ingest(IngestArgs),
    /// Sample K completions per prompt from a policy.
    Sample(SampleArgs),
    /// Annotate completions with the judge (resumable).
    Annotate(AnnotateArgs),
    /// Build DPO, best-of-K, score-conditioned and gold SFT datasets.
    Build(BuildArgs),
    /// Train a policy with DPO from preference pairs.
    TrainDpo(TrainDpoArgs),
    /// Supervised fine-tuning on best-of-K, conditioned or gold data.
    TrainSft(TrainSftArgs),
    /// Correlation, win-rate, noisy-context and sweep analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Data-scaling sweep over nested fractions of the annotated prompts.
    Sweep(SweepArgs),
    /// Win-rate and noisy-context evaluation of a trained policy.
    Eval(EvalArgs),
    /// Every stage end to end in one run directory.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep only this fraction (nested across fractions for one seed).
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub prompts: PathBuf,
    /// Policy checkpoint; the planted-task reference when omitted.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// Prompts JSONL.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub completions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the offline mock judge.
    #[arg(long)]
    pub mock: bool,
    /// Re-send prompts previously rejected.
    #[arg(long)]
    pub retry_rejects: bool,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub completions: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Gold answers JSONL (`prompt_id`, `answer`); gold SFT is skipped without it.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub min_margin: Option<i64>,
    /// `higher` (chosen outscores rejected) or `literal`.
    #[arg(long)]
    pub margin_direction: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct OptimArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// `sgd` or `adam`.
    #[arg(long)]
    pub optimizer: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainDpoArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// Reference checkpoint; the planted-task reference when omitted.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Length-normalized log-probabilities.
    #[arg(long)]
    pub average: bool,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct TrainSftArgs {
    /// `rs_sft.jsonl`, `gold_sft.jsonl` or (with --steerlm) `steerlm_sft.jsonl`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steerlm: bool,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Pearson matrix of score differences against preference labels.
    Correlate(CorrelateArgs),
    /// Win-rate of a policy against the reference.
    Winrate(WinrateArgs),
    /// Win-rate with a non-informative context block.
    Noisy(NoisyArgs),
    /// Same as the top-level `sweep`.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// JSONL records with `a`, `b` (score objects) and `prefers_a`.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct WinrateArgs {
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub judge: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NoisyArgs {
    #[command(flatten)]
    pub base: WinrateArgs,
    /// `blank` or `random`.
    #[arg(long, default_value = "blank")]
    pub noise: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated fractions in (0, 1].
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// `mock` or `live`.
    #[arg(long)]
    pub judge: Option<String>,
    #[arg(long, default_value = "runs/sweep")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub judge: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, default_value = "runs/default")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub judge: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({
                "error": format!("{e:#}"),
                "command": commands::name(&cli.command),
            });
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}
