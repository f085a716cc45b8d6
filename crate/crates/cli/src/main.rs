//! `promptune` — pipeline driver for prompt tuning frozen discrete-unit LMs.
//!
//! Five subcommands cover the full workflow: `gen-data` builds a synthetic
//! task corpus, `pretrain` fits and freezes a backbone, `tune` learns deep
//! prompts against it, `eval` scores a tuned run, and `analyze` exports
//! SHAP beeswarm data for learnable-verbalizer runs.
//!
//! Exit codes: 0 on success, 2 for user or configuration errors, 3 for
//! state-contract violations (unfrozen backbone, analysis of a mapped run).
//! Every command is deterministic given its flags, config, and seed;
//! primary outputs are byte-identical across re-runs and timestamps appear
//! only in the sidecar manifest each command writes next to its outputs.

mod commands;
mod manifest;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    /// User or configuration mistake: bad flag, missing file, malformed
    /// config, mismatched shapes. Exit code 2.
    pub fn user(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    /// State-contract violation: the files are well-formed but the pipeline
    /// rules forbid the operation. Exit code 3.
    pub fn state(message: impl Into<String>) -> Self {
        CliError { code: 3, message: message.into() }
    }
}

impl From<promptune::Error> for CliError {
    fn from(e: promptune::Error) -> Self {
        match e {
            promptune::Error::NotFrozen(_) => CliError::state(e.to_string()),
            _ => CliError::user(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "promptune", version, about = "Prompt tuning pipeline for frozen discrete-unit language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task dataset plus its unit codebook.
    GenData(GenDataArgs),
    /// Pretrain a backbone on a dataset and save it frozen.
    Pretrain(PretrainArgs),
    /// Tune deep prompts and a verbalizer against a frozen backbone.
    Tune(TuneArgs),
    /// Score a tuned run on a dataset split.
    Eval(EvalArgs),
    /// Export SHAP beeswarm attributions for a learnable-verbalizer run.
    Analyze(AnalyzeArgs),
}

/// Flags override keys of the JSON file passed via `--config`; built-in
/// defaults fill whatever remains unset.
#[derive(Args)]
struct GenDataArgs {
    /// JSON config file; keys mirror the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Builtin task name: cycle10, content2, content4, prosody2, prosody4,
    /// or mixed4.
    #[arg(long)]
    task: Option<String>,
    /// Seed for the generator, quantizer, and split shuffle.
    #[arg(long)]
    seed: Option<u64>,
    /// Examples generated per class, before splitting.
    #[arg(long = "n-per-class")]
    n_per_class: Option<usize>,
    /// Output directory for dataset.ndjson, codebook.json, manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON config file; keys mirror the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset (NDJSON, as written by gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path (a sidecar manifest lands next to it).
    #[arg(long)]
    out: PathBuf,
    /// Backbone variant: gslm (units only) or pgslm (units + prosody).
    #[arg(long)]
    variant: Option<String>,
    /// Unit vocabulary size; defaults to the dataset's observed vocabulary.
    #[arg(long)]
    vocab: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Examples per gradient step.
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for batch shuffling during pretraining.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for weight initialization; defaults to a substream of --seed.
    #[arg(long = "build-seed")]
    build_seed: Option<u64>,
}

#[derive(Args)]
struct TuneArgs {
    /// JSON experiment config; keys mirror the flags below plus `seeds`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Frozen backbone checkpoint.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Task dataset (NDJSON).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Task name recorded in the run and reports; defaults to the data
    /// file's stem.
    #[arg(long)]
    task: Option<String>,
    /// Verbalizer kind: learnable, random, or frequency.
    #[arg(long)]
    verbalizer: Option<String>,
    /// Prompt rows injected per block.
    #[arg(long = "prompt-len")]
    prompt_len: Option<usize>,
    /// Single tuning seed; overrides the config's `seeds` list.
    #[arg(long)]
    seed: Option<u64>,
    /// Tuning epochs (early stopping may end sooner).
    #[arg(long)]
    epochs: Option<usize>,
    /// Examples per gradient step.
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    patience: Option<usize>,
    /// Output directory; each seed writes into <out>/seed-<s>/.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory (or run.json path) produced by tune.
    #[arg(long)]
    run: PathBuf,
    /// Dataset to score on (NDJSON).
    #[arg(long)]
    data: PathBuf,
    /// Metric: acc, f1, or eer (binary tasks only).
    #[arg(long, default_value = "acc")]
    metric: String,
    /// Split to score: train, valid, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Backbone checkpoint; defaults to the path recorded in the run's
    /// manifest.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Report path; defaults to metrics-<split>-<metric>.json in the run
    /// directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run directory (or run.json path) produced by tune.
    #[arg(long)]
    run: PathBuf,
    /// Dataset whose test split is explained (NDJSON).
    #[arg(long)]
    data: PathBuf,
    /// Explain a single class; all classes when omitted.
    #[arg(long)]
    class: Option<usize>,
    /// Units kept per beeswarm, ranked by mean |phi|.
    #[arg(long = "top-k", default_value_t = 10)]
    top_k: usize,
    /// Export format: ndjson or svg.
    #[arg(long, default_value = "ndjson")]
    format: String,
    /// Backbone checkpoint; defaults to the path recorded in the run's
    /// manifest.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Output directory for beeswarm-class-<c>.<format> files.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Pretrain(args) => commands::pretrain(args),
        Command::Tune(args) => commands::tune(args),
        Command::Eval(args) => commands::eval(args),
        Command::Analyze(args) => commands::analyze(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
