use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod io;

/// Kernel neural network mixed models for genetic risk prediction.
#[derive(Debug, Parser)]
#[command(name = "knn", version, about)]
pub struct Cli {
    /// Worker threads for parallel work (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory, created if missing.
    #[arg(long, short)]
    out: PathBuf,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter SNPs by call rate, MAF and Hardy-Weinberg p-value, then impute.
    Qc {
        #[arg(long)]
        genotypes: PathBuf,
        #[arg(long)]
        min_call_rate: Option<f64>,
        #[arg(long)]
        min_maf: Option<f64>,
        #[arg(long)]
        hwe_alpha: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Build an input kernel matrix from genotypes.
    Kernel {
        #[arg(long)]
        genotypes: PathBuf,
        /// Kernel name: product, covariance, ibs or poly2.
        #[arg(long, default_value = "product")]
        kernel: String,
        /// Recode genotypes (dominant or recessive) first.
        #[arg(long)]
        recode: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit an LMM or KNN model and write in-sample predictions.
    Fit {
        #[arg(long)]
        genotypes: PathBuf,
        #[arg(long)]
        phenotype: PathBuf,
        #[arg(long)]
        covariates: Option<PathBuf>,
        /// lmm or knn.
        #[arg(long)]
        model: Option<String>,
        /// Repeat for several kernels.
        #[arg(long = "input-kernel")]
        input_kernels: Vec<String>,
        /// product or poly2 (KNN only).
        #[arg(long)]
        output_kernel: Option<String>,
        /// Leave the intercept out of the fixed effects.
        #[arg(long)]
        no_intercept: bool,
        /// Also write the n x n predictor matrix (KNN only).
        #[arg(long)]
        write_predictor: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Predict from a saved model on matching genotypes and phenotype.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        genotypes: PathBuf,
        #[arg(long)]
        phenotype: PathBuf,
        #[arg(long)]
        covariates: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run a Monte-Carlo comparison of prediction methods.
    Simulate {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Check the KNN vs LMM prediction-error bound and Schur positivity.
    CheckBounds {
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(status) => ExitCode::from(status),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
