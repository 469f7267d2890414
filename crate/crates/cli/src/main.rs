//! `kmgame`: data generation, fitting, analysis and control experiments on
//! the two-agent benchmark.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use koopman_core::experiment::{self, ExperimentConfig, Profile};
use koopman_core::{Error, Result};
use serde_json::json;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "kmgame", version, about = "Structured Koopman models and multi-agent control experiments")]
struct Cli {
    /// TOML config merged over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: ProfileArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate the benchmark and write CSV trajectories.
    Simulate,
    /// Generate data, fit the model and report held-out RMS.
    Fit,
    /// Transient metrics of a fitted model.
    Analyze {
        /// Model bundle (default: <out>/model.bundle).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Baseline, optimum and equilibrium on sampled initial states.
    Control {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Text summary of the results in the output directory.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let profile = Profile::from(cli.profile);
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, profile)?,
        None => ExperimentConfig::profile(profile),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = load_config(cli)?;
    let value = match &cli.command {
        Command::Simulate => experiment::cmd_simulate(&cfg)?,
        Command::Fit => serde_json::to_value(experiment::cmd_fit(&cfg)?)?,
        Command::Analyze { model } => {
            let report = experiment::cmd_analyze(&cfg, model.as_deref())?;
            eprint!("{}", report.to_table());
            serde_json::to_value(report)?
        }
        Command::Control { model } => {
            let summary = experiment::cmd_control(&cfg, model.as_deref())?;
            serde_json::to_value(summary.aggregate)?
        }
        Command::Report => {
            let text = experiment::cmd_report(&cfg)?;
            eprint!("{text}");
            json!({ "report": cfg.out_dir.join(experiment::REPORT_FILE) })
        }
    };
    Ok(value)
}

fn error_json(e: &Error) -> serde_json::Value {
    json!({ "error": { "kind": e.kind(), "message": e.to_string() } })
}

/// Print to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit(&json!({ "error": { "kind": "usage", "message": e.to_string() } }).to_string());
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(value) => {
            emit(&serde_json::to_string_pretty(&value).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            emit(&error_json(&e).to_string());
            ExitCode::FAILURE
        }
    }
}
