//! Command-line front end for the MRF reconstruction pipeline.
//!
//! Exit codes: reconstruction/training divergence exits 3, missing artifacts
//! exit 4, configuration and validation problems exit 2.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bardip::config::{ExperimentConfig, PipelineMode};
use bardip::pipeline::{cmd_all, cmd_evaluate, cmd_pretrain, cmd_reconstruct, cmd_simulate, ReconOverrides};
use bardip::Error;

#[derive(Parser)]
#[command(name = "bardip", about = "Ground-truth-free MRF reconstruction pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the experiment root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (also sizes the intra-op thread pool).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Clone)]
struct ReconOpts {
    /// Reconstruction path: bardip, dipmrf, or the dictionary-matching
    /// baseline "match".
    #[arg(long)]
    mode: Option<String>,
    /// Override the configured iteration budget.
    #[arg(long)]
    iterations: Option<usize>,
    /// Reconstruct only this SNR entry (dB).
    #[arg(long)]
    snr: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write phantom, dictionary, basis, trajectory and k-space files.
    Simulate(CommonOpts),
    /// Pretrain the Bloch autoencoder on the simulated dictionary.
    Pretrain(CommonOpts),
    /// Run a reconstruction for every configured SNR.
    Reconstruct {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        recon: ReconOpts,
    },
    /// Compute metrics, previews and convergence data for finished runs.
    Evaluate(CommonOpts),
    /// simulate, pretrain, reconstruct and evaluate in sequence.
    All {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        recon: ReconOpts,
    },
}

fn load_config(common: &CommonOpts) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.acquisition.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn overrides(common: &CommonOpts, recon: Option<&ReconOpts>) -> Result<ReconOverrides, Error> {
    let mut ov = ReconOverrides { jobs: common.jobs, ..Default::default() };
    if let Some(r) = recon {
        ov.mode = r.mode.as_deref().map(PipelineMode::parse).transpose()?;
        ov.iterations = r.iterations;
        ov.snr = r.snr;
    }
    Ok(ov)
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Simulate(c) | Command::Pretrain(c) | Command::Evaluate(c) => c.clone(),
        Command::Reconstruct { common, .. } | Command::All { common, .. } => common.clone(),
    };
    if let Some(jobs) = common.jobs {
        // Sizes the global pool used by intra-op parallelism; a failure just
        // means a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
    }

    match &cli.command {
        Command::Simulate(c) => cmd_simulate(&load_config(c)?),
        Command::Pretrain(c) => cmd_pretrain(&load_config(c)?),
        Command::Reconstruct { common, recon } => {
            let cfg = load_config(common)?;
            cmd_reconstruct(&cfg, &overrides(common, Some(recon))?)
        }
        Command::Evaluate(c) => cmd_evaluate(&load_config(c)?),
        Command::All { common, recon } => {
            let cfg = load_config(common)?;
            cmd_all(&cfg, &overrides(common, Some(recon))?)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
