use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use taskbias_cli::config::RunConfig;
use taskbias_cli::pipeline::{self, Run};
use taskbias_cli::{exit_code, UsageError, EXIT_OK, EXIT_USAGE};

/// Task-bias experiments on a toy vision-language model.
///
/// Any config key can be overridden with `--section.key value`
/// (for example `--pretrain.epochs 5`); `--seed N` sets the global seed.
#[derive(Parser)]
#[command(name = "taskbias", version, arg_required_else_help = true)]
struct Cli {
    /// TOML config file, or `default` for the built-in configuration.
    #[arg(long, global = true, default_value = "default")]
    config: String,
    /// Directory all configured paths are relative to.
    #[arg(long, global = true, default_value = ".")]
    root: PathBuf,
    /// Upper bound on worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Force a single worker and ordered reductions.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Render the synthetic corpus and its pairwise splits.
    GenData,
    /// Contrastively pretrain the backbone.
    Pretrain,
    /// Per-image task-bias probe with histogram and extremes.
    Probe,
    /// Compare task-directed text prefixes against the baseline table.
    PrefixEval,
    /// Learn task-directed visual prompts for every pair and direction.
    TunePrompt,
    /// Intended-task selection rates with and without prompts.
    EvalDisambiguation,
    /// Object classification with and without the object prompt.
    EvalDownstream,
    /// Attention rollout and directed difference maps.
    AttnMap,
    /// Predict each image's bias direction.
    ClassifyBias,
    /// The whole pipeline in order.
    All,
}

/// Splits `--a.b value`, `--a.b=value` and `--seed value` out of argv.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !(key.contains('.') || key == "seed") {
            rest.push(arg);
            continue;
        }
        let value = match inline.or_else(|| it.next()) {
            Some(v) => v,
            None => bail!(UsageError(format!("--{key} needs a value"))),
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn run(cli: &Cli, overrides: &[(String, String)]) -> Result<()> {
    if cli.workers == 0 {
        bail!(UsageError("--workers must be at least 1".into()));
    }
    let workers = if cli.deterministic { 1 } else { cli.workers };
    let config = RunConfig::load(&cli.config)?.resolve(overrides)?;
    let run = Run::new(config, &cli.root);
    run.snapshot()?;
    eprintln!("run {} (workers {workers})", run.run_id);
    match cli.command {
        Command::GenData => pipeline::gen_data(&run).map(drop),
        Command::Pretrain => pipeline::pretrain(&run).map(drop),
        Command::Probe => pipeline::probe(&run).map(drop),
        Command::PrefixEval => pipeline::prefix_eval(&run).map(drop),
        Command::TunePrompt => pipeline::tune_prompts(&run).map(drop),
        Command::EvalDisambiguation => pipeline::disambiguation(&run).map(drop),
        Command::EvalDownstream => pipeline::downstream(&run).map(drop),
        Command::AttnMap => pipeline::attn_map(&run).map(drop),
        Command::ClassifyBias => pipeline::classify_bias(&run).map(drop),
        Command::All => pipeline::all(&run),
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(&cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
