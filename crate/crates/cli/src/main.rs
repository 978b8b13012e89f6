//! `iflab`: batch driver for the influence laboratory.
//!
//! Every subcommand works inside one run directory, reads the artifacts of
//! earlier stages from it and records its own outputs in `manifest.json`.
//! Exit codes: 0 success, 1 numeric or other failure, 2 configuration
//! error, 3 missing artifact.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Context, Outcome};
use config::RunConfig;
use error::CliError;
use manifest::{config_hash, hash_files, CommandEntry, Manifest};

#[derive(Debug, Parser)]
#[command(name = "iflab", version, about = "Deterministic training and influence-function experiments")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (overrides `out_dir` from the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent jobs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Run seed (overrides `run_seed` from the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train to the checkpoint.
    Train,
    /// Score test points against training points at the checkpoint.
    Influence,
    /// Parameter divergence under an up-weighted subset.
    Divergence,
    /// Influence fading over fine-tuning steps.
    Fading,
    /// Gronwall bound check on the divergence trajectories.
    Gronwall,
    /// Second-order residual of the exact ε-Jacobian.
    FirstOrder,
    /// Misprediction correction campaign.
    Correct,
    /// Verify recorded artifacts and aggregate summaries.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Influence => "influence",
            Command::Divergence => "divergence",
            Command::Fading => "fading",
            Command::Gronwall => "gronwall",
            Command::FirstOrder => "first-order",
            Command::Correct => "correct",
            Command::Report => "report",
        }
    }

    fn run(self, ctx: &Context) -> Result<Outcome, CliError> {
        match self {
            Command::GenData => commands::gen_data(ctx),
            Command::Train => commands::train_cmd(ctx),
            Command::Influence => commands::influence(ctx),
            Command::Divergence => commands::divergence(ctx),
            Command::Fading => commands::fading(ctx),
            Command::Gronwall => commands::gronwall(ctx),
            Command::FirstOrder => commands::first_order(ctx),
            Command::Correct => commands::correct(ctx),
            Command::Report => commands::report(ctx),
        }
    }
}

fn context(cli: &Cli) -> Result<Context, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run_seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::Config("no run directory: pass --out or set out_dir".into()))?;
    cfg.out_dir = None;
    Ok(Context { cfg, out })
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    let ctx = context(cli)?;
    let report_only = matches!(cli.command, Command::Report);
    if report_only && !ctx.out.is_dir() {
        return Err(CliError::MissingArtifact(ctx.out.clone()));
    }
    commands::ensure_dir(&ctx.out)?;
    let config = serde_json::to_value(&ctx.cfg).map_err(|e| CliError::Other(e.to_string()))?;
    let config_sha256 = config_hash(&config);
    let name = cli.command.name();
    match cli.command.run(&ctx) {
        Ok(outcome) => {
            let entry = CommandEntry {
                status: "ok".into(),
                config,
                config_sha256,
                inputs: hash_files(&ctx.out, &outcome.inputs)?,
                outputs: hash_files(&ctx.out, &outcome.outputs)?,
                settings: outcome.settings,
                summary: outcome.summary,
                error: None,
            };
            Manifest::record(&ctx.out, name, entry)
        }
        Err(err @ CliError::Numeric(_)) => {
            let entry = CommandEntry {
                status: "failed".into(),
                config,
                config_sha256,
                inputs: Default::default(),
                outputs: Default::default(),
                settings: Default::default(),
                summary: serde_json::Value::Null,
                error: Some(err.to_string()),
            };
            Manifest::record(&ctx.out, name, entry)?;
            Err(err)
        }
        Err(err) => Err(err),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("iflab {}: {err}", cli.command.name());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
