// SPDX-License-Identifier: MIT OR Apache-2.0

//! `leakguard`: run the mitigation pipeline one stage at a time.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use leakguard_core::pipeline::{Pipeline, RunConfig, Stage};
use leakguard_core::Error;

#[derive(Parser)]
#[command(
    name = "leakguard",
    version,
    about = "Feature-level PII leakage mitigation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing stage outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Output directory (falls back to the config, then $LEAKGUARD_OUT).
    #[arg(long, global = true)]
    stage_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic corpus and its datasets.
    GenCorpus(#[command(flatten)] Common),
    /// Train the language model.
    TrainLm(#[command(flatten)] Common),
    /// Record residual activations at every layer.
    Harvest(#[command(flatten)] Common),
    /// Probe every layer and select the intervention layer.
    Probe(#[command(flatten)] Common),
    /// Train the sparse autoencoder at the selected layer.
    TrainSae(#[command(flatten)] Common),
    /// Rank latents and neurons by activation on email tokens.
    Rank(#[command(flatten)] Common),
    /// Evaluate the intervention grid.
    Eval(#[command(flatten)] Common),
    /// Write the text report and plots.
    Report(#[command(flatten)] Common),
    /// Run every stage in order.
    Run(#[command(flatten)] Common),
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn pipeline(c: &Common) -> Result<Pipeline, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = cfg.resolve_out_dir(c.stage_dir.as_deref());
    Pipeline::new(cfg, out, c.force)
}

fn run(cli: Cli) -> Result<(), Error> {
    let (common, stages): (Common, Vec<Stage>) = match cli.command {
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml()?);
            return Ok(());
        }
        Command::GenCorpus(c) => (c, vec![Stage::GenCorpus]),
        Command::TrainLm(c) => (c, vec![Stage::TrainLm]),
        Command::Harvest(c) => (c, vec![Stage::Harvest]),
        Command::Probe(c) => (c, vec![Stage::Probe]),
        Command::TrainSae(c) => (c, vec![Stage::TrainSae]),
        Command::Rank(c) => (c, vec![Stage::Rank]),
        Command::Eval(c) => (c, vec![Stage::Eval]),
        Command::Report(c) => (c, vec![Stage::Report]),
        Command::Run(c) => (c, Stage::ALL.to_vec()),
    };
    let p = pipeline(&common)?;
    for stage in stages {
        log::info!("stage {stage} -> {}", p.out_dir().display());
        let outcome = p.run(stage)?;
        println!("[{stage}] {}", outcome.summary.trim_end());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
