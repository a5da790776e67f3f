use std::path::PathBuf;
use std::process::ExitCode;

use amo_core::pipeline::experiment::GridAxis;
use amo_core::pipeline::run::{default_features_path, load_cohort_config};
use amo_core::pipeline::{init_workers, run_evaluate, run_features, run_km_export, run_train, FeatureOptions, RunConfig};
use amo_core::survival::OutcomeKind;
use amo_core::synth::{generate_cohort, write_cohort};
use amo_core::volume::Connectivity;
use amo_core::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "amo", version, about = "Multi-modal survival modeling on CT-derived features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (clinical table, oracle table, images).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// TOML file with cohort generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Strength of the nodal x primary interaction in the hazard.
        #[arg(long)]
        gamma: Option<f64>,
        /// Skip writing the image volumes.
        #[arg(long)]
        no_images: bool,
    },
    /// Extract radiomic features from a cohort's volumes into a CSV.
    Features {
        #[arg(long)]
        data: PathBuf,
        /// Defaults to features.csv inside the data directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = amo_core::volume::DEFAULT_RHO, value_parser = parse_rho)]
        rho: f64,
        #[arg(long, default_value_t = amo_core::volume::DEFAULT_BIN_WIDTH, value_parser = parse_positive)]
        bin_width: f64,
        #[arg(long, default_value_t = 26, value_parser = parse_connectivity)]
        connectivity: u32,
    },
    /// Cross-validate, optionally grid search, and fit a final model.
    Train {
        config: PathBuf,
        /// Hyperparameter axis as key=v1,v2,...; repeat for a Cartesian grid.
        #[arg(long = "grid")]
        grid: Vec<String>,
    },
    /// Score a cohort with a saved model.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Kaplan-Meier curves of patients split by predicted score.
    KmExport {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dfs")]
        outcome: String,
        /// Defaults to the Youden-optimal threshold.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_rho(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(format!("{s} is not in [0, 1]")),
    }
}

fn parse_connectivity(s: &str) -> std::result::Result<u32, String> {
    match s.parse::<u32>() {
        Ok(v @ (6 | 18 | 26)) => Ok(v),
        _ => Err(format!("{s} is not one of 6, 18, 26")),
    }
}

fn parse_positive(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("{s} is not a positive number")),
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn run(cli: Cli) -> Result<()> {
    init_workers()?;
    match cli.command {
        Command::Synth { out, config, n, seed, gamma, no_images } => {
            let mut cfg = match config {
                Some(p) => load_cohort_config(&p)?,
                None => Default::default(),
            };
            if let Some(n) = n {
                cfg.n_patients = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(g) = gamma {
                cfg.gamma = g;
            }
            cfg.validate().map_err(config_err)?;
            let cohort = generate_cohort(&cfg)?;
            write_cohort(&cohort, &out, !no_images)?;
            eprintln!("wrote {} patients to {}", cohort.len(), out.display());
        }
        Command::Features { data, out, rho, bin_width, connectivity } => {
            let opts = FeatureOptions { rho, bin_width, connectivity: Connectivity::from_count(connectivity)? };
            let out = out.unwrap_or_else(|| default_features_path(&data));
            let n = run_features(&data, &out, &opts)?;
            eprintln!("wrote features of {n} patients to {}", out.display());
        }
        Command::Train { config, grid } => {
            let cfg = RunConfig::load(&config)?;
            let axes = grid.iter().map(|s| s.parse::<GridAxis>()).collect::<Result<Vec<_>>>()?;
            let summary = run_train(&cfg, &axes)?;
            for (k, m) in &summary.report.mean {
                println!("{k}\t{m:.4}\t+/- {:.4}", summary.report.sd[k]);
            }
            eprintln!("checkpoint: {}", summary.checkpoint.display());
        }
        Command::Evaluate { checkpoint, data, out } => {
            let report = run_evaluate(&checkpoint, &data, &out)?;
            for (k, m) in &report.mean {
                println!("{k}\t{m:.4}");
            }
        }
        Command::KmExport { predictions, data, outcome, threshold, out } => {
            let outcome: OutcomeKind = outcome.parse().map_err(config_err)?;
            let km = run_km_export(&predictions, &data, outcome, threshold, &out)?;
            println!("threshold\t{}\nchi_square\t{:.4}\np_value\t{:.4e}", km.threshold, km.logrank.chi_square, km.logrank.p_value);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        e if e.is_numeric() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
