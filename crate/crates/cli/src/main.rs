//! `tvmc`: run variational time-evolution experiments from JSON configs.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tvmc_cli::experiments::{self, ExperimentResult};
use tvmc_cli::{presets, CliError, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "tvmc", version, about = "Time-dependent variational Monte Carlo experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Single spin under sigma^y.
    RunSingleSpin(Common),
    /// Tilted Ising chain with an infidelity table.
    RunTiltedIsing(Common),
    /// Transverse-field Ising quench.
    RunTfim(Common),
    /// Cross-interpolation accuracy on saved checkpoints.
    RunTciBench {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to `output.checkpoint_dir` of the config.
        #[arg(long, value_name = "DIR")]
        checkpoints: Option<PathBuf>,
    },
    /// Parse and validate a config without running it.
    ValidateConfig(Common),
    /// List the built-in presets.
    ListPresets,
}

fn load(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(path), _) => ExperimentConfig::from_json(&fs::read_to_string(path)?)?,
        (None, Some(name)) => presets::preset(name)?,
        (None, None) => return Err(CliError::Config("one of --config or --preset is required".into())),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn report(result: &ExperimentResult, common: &Common) {
    let points: Vec<_> = result
        .summary
        .points
        .iter()
        .map(|p| {
            json!({
                "backend": p.backend,
                "epsilon": p.epsilon,
                "n_samples": p.n_samples,
                "final_infidelity_mean": p.final_infidelity.as_ref().map(|s| s.mean),
                "final_infidelity_std": p.final_infidelity.as_ref().map(|s| s.std),
            })
        })
        .collect();
    println!("{}", json!({ "out": common.out, "runs": result.summary.runs.len(), "points": points }));
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::RunSingleSpin(c) => report(&experiments::run_single_spin(&load(&c)?, Some(&c.out))?, &c),
        Command::RunTiltedIsing(c) => report(&experiments::run_tilted_ising(&load(&c)?, Some(&c.out))?, &c),
        Command::RunTfim(c) => report(&experiments::run_tfim_quench(&load(&c)?, Some(&c.out))?, &c),
        Command::RunTciBench { common, checkpoints } => {
            let cfg = load(&common)?;
            let dir = experiments::checkpoint_dir(&cfg, checkpoints.as_deref())?;
            let summary = experiments::run_tci_benchmark(&cfg, &dir, Some(&common.out))?;
            println!("{}", json!({ "out": common.out, "rows": summary.rows.len() }));
        }
        Command::ValidateConfig(c) => {
            load(&c)?;
            println!("{}", json!({ "valid": true }));
        }
        Command::ListPresets => {
            for (name, _) in presets::PRESETS {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            println!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}
