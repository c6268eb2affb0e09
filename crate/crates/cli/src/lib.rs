// SPDX-License-Identifier: Apache-2.0

//! The `kinaema` command line. Every subcommand reads the shared config
//! (`--config`, `--set section.key=value`); its own flags are shorthands
//! for config keys and are applied before `--set`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O or
//! corrupt input, 4 numeric failure.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use kinaema_core::config::Config;
use kinaema_core::{Error, Result};

mod commands;

pub const THREADS_ENV: &str = "KINAEMA_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "kinaema",
    version,
    about = "Recurrent memory models for relative pose estimation from memory"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct ConfigArgs {
    /// Config file (TOML, or JSON with a .json extension) with sections
    /// world, data, model, train and eval.
    #[arg(long, value_name = "PATH", global = true)]
    pub config: Option<PathBuf>,
    /// Set one config key, e.g. `--set train.batch_size=16`. Repeatable;
    /// wins over the file and over the subcommand's own flags.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset of episodes in the synthetic world.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Threshold accuracies of a checkpoint as a JSON report.
    Eval(EvalArgs),
    /// Accuracy over a grid of sequence lengths as CSV.
    Sweep(EvalArgs),
    /// Per-step cost of memory updates and decoding as CSV.
    Bench(BenchArgs),
    /// Dump decoder cross-attention probabilities for one episode.
    DumpAttn(DumpAttnArgs),
    /// Compare analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Summarize a dataset or checkpoint directory, or print the resolved
    /// config when no path is given.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory, created if absent.
    #[arg(long)]
    pub out: PathBuf,
    /// Same as `--set data.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Same as `--set data.episodes=N`.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Same as `--set data.length=N`.
    #[arg(long)]
    pub length: Option<usize>,
    /// Same as `--set data.scenes=N`.
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Action-space profile: `train` (10 cm / 5°) or `eval` (25 cm / 10°).
    /// Same as `--set data.profile=P`.
    #[arg(long)]
    pub profile: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Training dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Held-out dataset for periodic validation and best-checkpoint selection.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Run directory: `last/`, `best/`, `train_log.jsonl`, `config.toml`.
    #[arg(long)]
    pub out: PathBuf,
    /// Model family (kinaema, gru, ema, trunc). Same as `--set model.family=F`.
    #[arg(long)]
    pub model: Option<String>,
    /// Same as `--set train.total_steps=N`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Same as `--set train.seed=N --set model.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Same as `--set train.batch_size=N`.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Continue from `<out>/last` if present.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many steps in total; the schedule still spans
    /// `train.total_steps`.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint directory (a run's `best/` or `last/`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated sequence lengths. Same as `--set eval.lengths=[..]`.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    /// Also write the result into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Same as `--set eval.max_episodes=N`.
    #[arg(long)]
    pub max_episodes: Option<usize>,
    /// Steps counted as recent in the within/beyond breakdown. Same as
    /// `--set eval.window=N`.
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated model families.
    #[arg(long, value_delimiter = ',', default_value = "kinaema,gru,ema,trunc")]
    pub models: Vec<String>,
    /// Comma-separated step indices at which to time.
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
    pub steps: Vec<usize>,
    /// Timed samples per measurement; the median and 95th percentile are reported.
    #[arg(long, default_value_t = 31)]
    pub samples: usize,
    /// Discarded calls before timing.
    #[arg(long, default_value_t = 20)]
    pub warmup: usize,
    /// Also write `bench.csv` into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpAttnArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset holding the episode.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for `attention.json` and `assignments.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Episode index within the dataset.
    #[arg(long, default_value_t = 0)]
    pub episode: usize,
    /// Steps to integrate; defaults to the whole episode.
    #[arg(long)]
    pub length: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Model family, or `all` for every family and both decoders.
    #[arg(long, default_value = "all")]
    pub model: String,
    /// Entries checked per parameter tensor; 0 checks all of them.
    #[arg(long, default_value_t = 12)]
    pub max_entries: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset or checkpoint directory.
    pub path: Option<PathBuf>,
}

/// Caps rayon's worker pool from `KINAEMA_THREADS`; unset means one worker
/// per logical core.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A pool built earlier in the same process already has its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// File values, then the subcommand's shorthand flags, then `--set`.
pub fn load_config(args: &ConfigArgs, shorthand: &[String]) -> Result<Config> {
    let base = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    base.with_overrides(shorthand)?.with_overrides(&args.overrides)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a, out),
        Command::Train(a) => commands::train(a, out),
        Command::Eval(a) => commands::eval(a, out),
        Command::Sweep(a) => commands::sweep(a, out),
        Command::Bench(a) => commands::bench(a, out),
        Command::DumpAttn(a) => commands::dump_attn(a, out),
        Command::GradCheck(a) => commands::grad_check(a, out),
        Command::Inspect(a) => commands::inspect(a, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_flag_is_documented() {
        let cmd = Cli::command();
        for sub in cmd.get_subcommands() {
            assert!(sub.get_about().is_some(), "{}", sub.get_name());
            for arg in sub.get_arguments() {
                let id = arg.get_id().as_str();
                if id == "help" || id == "version" {
                    continue;
                }
                assert!(arg.get_help().is_some(), "{} --{id}", sub.get_name());
            }
        }
    }

    #[test]
    fn shorthands_apply_before_set() {
        let args = ConfigArgs {
            config: None,
            overrides: vec!["data.seed=9".into()],
        };
        let cfg = load_config(&args, &["data.seed=3".into(), "data.length=5".into()]).unwrap();
        assert_eq!(cfg.data.seed, 9);
        assert_eq!(cfg.data.length, 5);
    }
}
