//! `glitchlab`: synthetic scenarios, oracle scans, detection, repair,
//! diagnostics and sweeps.
//!
//! Exit codes: 0 ok, 1 other failure, 2 configuration, 3 I/O or file
//! format, 4 model verification, 5 degenerate-data fallback taken.

mod commands;
mod config;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "glitchlab", version, about = "Glitch-token detection and repair on hookable transformers")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the scenario, sampling and profiling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for scans; defaults to the number of cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory for reports and artifacts.
    #[arg(long, global = true, default_value = "glitchlab-out")]
    out_dir: PathBuf,
    #[command(flatten)]
    overrides: OverrideArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OverrideArgs {
    /// Sampling rate for detection and repair profiling.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// PCA components kept before the SVM.
    #[arg(long, global = true)]
    pca_dim: Option<usize>,
    /// SVM box constraint.
    #[arg(long, global = true)]
    svm_c: Option<f64>,
    /// Polynomial kernel degree.
    #[arg(long, global = true)]
    svm_degree: Option<u32>,
    /// Activation threshold for the neuron sets.
    #[arg(long, global = true)]
    threshold_m: Option<f64>,
    /// Fixed suppression factor; disables adaptive factors.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Fixed promotion factor; disables adaptive factors.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Comma-separated layer indices.
    #[arg(long, global = true, value_delimiter = ',')]
    key_layers: Option<Vec<usize>>,
}

#[derive(Args, Clone, Default)]
pub struct Inputs {
    /// Use a saved model instead of synthesizing one from the config.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
pub struct TraceInputs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Run on a recorded trace file instead of a model.
    #[arg(long, conflicts_with = "model")]
    pub traces: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build and verify a synthetic model with planted glitch tokens.
    Synth,
    /// Run the oracle on every token.
    Scan(Inputs),
    /// Sample, train, scan and validate.
    Detect(TraceInputs),
    /// Profile normal tokens and patch glitch tokens.
    Repair(Inputs),
    /// Write histogram, scatter and layer-distance CSVs.
    Diagnose(TraceInputs),
    /// Detection over a grid of sites, C and degree.
    Sweep(Inputs),
    /// Record labelled activation traces for every token.
    ExportTraces(Inputs),
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut cfg = RunConfig::load(cli.config.as_deref()).map_err(config_error)?;
    let o = &cli.overrides;
    cfg.apply(&Overrides {
        seed: cli.seed,
        gamma: o.gamma,
        pca_dim: o.pca_dim,
        svm_c: o.svm_c,
        svm_degree: o.svm_degree,
        threshold_m: o.threshold_m,
        alpha: o.alpha,
        beta: o.beta,
        key_layers: o.key_layers.clone(),
    });
    cfg.validate().map_err(config_error)?;
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(config_error(anyhow::anyhow!("--workers must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global().context("configuring worker pool")?;
    }
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let ctx = commands::Context { cfg, out_dir: cli.out_dir };
    let outcome = match cli.command {
        Command::Synth => commands::synth(&ctx)?,
        Command::Scan(i) => commands::scan(&ctx, &i)?,
        Command::Detect(i) => commands::detect(&ctx, &i)?,
        Command::Repair(i) => commands::repair(&ctx, &i)?,
        Command::Diagnose(i) => commands::diagnose(&ctx, &i)?,
        Command::Sweep(i) => commands::sweep(&ctx, &i)?,
        Command::ExportTraces(i) => commands::export_traces(&ctx, &i)?,
    };
    Ok(if outcome.fallback { ExitCode::from(5) } else { ExitCode::SUCCESS })
}

#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(ConfigError(e))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use glitchlab::Error as E;
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::InvalidArgument(_) => 2,
                E::Io(_) | E::Format { .. } => 3,
                E::Verification { .. } => 4,
                E::Degenerate(_) => 5,
                E::Numeric(_) => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}
