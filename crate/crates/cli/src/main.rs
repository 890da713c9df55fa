//! `priodiff`: seeded, reproducible experiments over the priodiff library.
//!
//! Every subcommand reads its inputs from `--out` (or the `[paths]` table),
//! writes artifacts atomically back into `--out`, and finishes with a
//! `<command>.manifest.json` listing the config hash and artifact hashes.
//!
//! Exit codes: 0 success, 1 runtime or verification failure, 2 invalid config.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use artifacts::Artifacts;
use config::{ConfigError, Preset, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "priodiff", version, about = "Priority-centric discrete diffusion experiments")]
struct Cli {
    /// TOML run configuration; its keys override the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: Preset,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the grammar token corpus and the continuous corpus.
    Synth,
    /// Token frequencies and per-category entropy.
    Stats,
    /// Train the toy VQ model and quantize the continuous corpus.
    Quantize,
    /// Per-position priority scores under the configured mode.
    Score,
    /// Base and priority schedules for one sequence, with band curves.
    Schedule {
        /// Sequence id; defaults to the first sequence in the corpus.
        #[arg(long)]
        sequence: Option<String>,
    },
    /// Train the tabular denoiser.
    Train,
    /// Sample sequences from a trained denoiser.
    Generate,
    /// Run the oracle verification suite.
    Verify,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Stats => "stats",
            Command::Quantize => "quantize",
            Command::Score => "score",
            Command::Schedule { .. } => "schedule",
            Command::Train => "train",
            Command::Generate => "generate",
            Command::Verify => "verify",
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let cfg = RunConfig::load(cli.preset, cli.config.as_deref(), cli.seed)?;
    let mut out = Artifacts::new(&cli.out)?;
    let mut passed = true;
    match &cli.command {
        Command::Synth => commands::synth(&mut out, &cfg)?,
        Command::Stats => commands::stats(&mut out, &cfg)?,
        Command::Quantize => commands::quantize(&mut out, &cfg)?,
        Command::Score => commands::score(&mut out, &cfg)?,
        Command::Schedule { sequence } => commands::schedule(&mut out, &cfg, sequence.as_deref())?,
        Command::Train => commands::train(&mut out, &cfg)?,
        Command::Generate => commands::generate_cmd(&mut out, &cfg)?,
        Command::Verify => passed = commands::verify(&mut out, &cfg)?,
    }
    out.finish(cli.command.name(), &cfg)?;
    Ok(passed)
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some()
            || matches!(e.downcast_ref::<priodiff::Error>(), Some(priodiff::Error::Config(_)))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
