//! Batch command-line front end: simulate datasets, fit factors, select the
//! rank by cross-validation, denoise gene-level effects and score fits
//! against simulated truth. Every command is deterministic given its
//! configuration; outputs are TSV matrices plus JSON manifests.

mod commands;
mod manifest;

use clap::{Args, Parser, Subcommand};
use falco_core::Error as CoreError;
use std::path::PathBuf;
use std::process::ExitCode;

/// Factor analysis for high-dimensional data with dependent observations.
#[derive(Parser)]
#[command(name = "falco", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for gene- and fold-parallel sections (default: all
    /// logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic multi-condition expression dataset with ground truth.
    Simulate(SimulateArgs),
    /// Fit factors, loadings and variance multipliers at a fixed or
    /// cross-validated rank.
    Fit(FitArgs),
    /// Select the number of factors by cross-validation (no final fit).
    SelectK(FitArgs),
    /// Per-gene denoised effect tests with multiple-testing adjustment.
    Denoise(DenoiseArgs),
    /// Score a fit against simulated truth.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON configuration (schema-versioned; seed mandatory).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the dataset.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct FitArgs {
    /// Expression matrix TSV (rows = genes, columns = samples).
    #[arg(long)]
    data: PathBuf,
    /// Covariance basis specification JSON.
    #[arg(long)]
    basis: PathBuf,
    /// Optional JSON block overriding fit parameters (schema-versioned).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of factors to fit (mutually exclusive with --select-k).
    #[arg(long, short)]
    k: Option<usize>,
    /// Choose the rank by cross-validation before fitting.
    #[arg(long)]
    select_k: bool,
    /// Skip the final whole-data fit after rank selection.
    #[arg(long)]
    no_final_fit: bool,
    /// Identifiability gate threshold.
    #[arg(long)]
    alpha: Option<f64>,
    /// Cross-validation folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Rank-grid fraction: the grid extends to ceil(eta * min(n, p)).
    #[arg(long)]
    eta: Option<f64>,
    /// Random seed (mandatory for --select-k).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the fit.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DenoiseArgs {
    /// Fit directory produced by `falco fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Expression matrix TSV (the data the fit was computed on).
    #[arg(long)]
    data: PathBuf,
    /// Covariance basis specification JSON.
    #[arg(long)]
    basis: PathBuf,
    /// Genotype matrix TSV (rows = SNPs, columns = individuals).
    #[arg(long)]
    genotypes: PathBuf,
    /// Gene-to-SNP map TSV with columns `gene` and `snp`.
    #[arg(long)]
    map: PathBuf,
    /// Study design JSON describing how genotype rows expand to sample
    /// covariates (written by `falco simulate`); omit when genotype rows are
    /// already per-sample.
    #[arg(long)]
    design: Option<PathBuf>,
    /// False discovery rate for the adjusted rejection column.
    #[arg(long, default_value_t = 0.05)]
    q: f64,
    /// Output TSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// Fit directory produced by `falco fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Truth directory produced by `falco simulate`.
    #[arg(long)]
    truth: PathBuf,
    /// Expression matrix TSV; required for --pca-baseline.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Add plain-PCA comparison columns.
    #[arg(long)]
    pca_baseline: bool,
    /// Output TSV path.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    // 2 = configuration or input error, 3 = numeric failure.
    if let Some(core) = err.downcast_ref::<CoreError>() {
        match core {
            CoreError::InvalidConfig(_)
            | CoreError::Parse { .. }
            | CoreError::Json(_)
            | CoreError::Io(_)
            | CoreError::UnmatchedIds { .. }
            | CoreError::DimensionMismatch { .. } => 2,
            _ => 3,
        }
    } else if err.downcast_ref::<std::io::Error>().is_some()
        || err.downcast_ref::<serde_json::Error>().is_some()
    {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    let result = match cli.command {
        Command::Simulate(args) => commands::simulate(&args),
        Command::Fit(args) => commands::fit(&args, false),
        Command::SelectK(mut args) => {
            args.select_k = true;
            commands::fit(&args, true)
        }
        Command::Denoise(args) => commands::denoise(&args),
        Command::Metrics(args) => commands::metrics(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
