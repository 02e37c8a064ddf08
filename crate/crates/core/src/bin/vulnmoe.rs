use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use vulnmoe::harness::config::ModelSpec;
use vulnmoe::harness::{run_command, Command, RunConfig};
use vulnmoe::model::ModelConfig;

#[derive(Parser)]
#[command(name = "vulnmoe", version, about = "MoE vulnerability detector: training, evaluation, scoring and curation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for reports and artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model preset, replacing the config's model.
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Run the configured training stages and save checkpoints.
    Train,
    /// Evaluate a checkpoint on a benchmark corpus.
    Eval,
    /// CASTLE score for a findings file.
    Score,
    /// Remove near-duplicates from a corpus.
    Dedup,
    /// Check an eval corpus for overlap with training corpora.
    Leak,
    /// Finite-difference gradient checks.
    Gradcheck,
    /// Analytic parameter counts for the model config.
    Paramcount,
    /// Write a synthetic corpus.
    GenSynth,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Train => Command::Train,
            Cmd::Eval => Command::Eval,
            Cmd::Score => Command::Score,
            Cmd::Dedup => Command::Dedup,
            Cmd::Leak => Command::Leak,
            Cmd::Gradcheck => Command::Gradcheck,
            Cmd::Paramcount => Command::Paramcount,
            Cmd::GenSynth => Command::GenSynth,
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(name) = &cli.preset {
        cfg.model = ModelSpec(ModelConfig::preset(name)?);
    }
    let cmd = Command::from(cli.command);
    let out = cli
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cmd.name()));
    let result = run_command(cmd, &cfg, &out).with_context(|| format!("`{cmd}` failed"))?;
    for line in &result.summary {
        println!("{line}");
    }
    println!("report: {}", out.join("report.json").display());
    if !result.passed {
        eprintln!("{cmd}: gate failed");
    }
    Ok(result.passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
