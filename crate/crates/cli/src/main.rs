//! `lab`: the executable face of the laboratory.
//!
//! Subcommands:
//!   verify    run the identity suite, one CSV row per check; exit 0 iff all pass
//!   train     deterministic gradient descent from a flat config file
//!   sweep     temperature x coefficient x objective grid, one CSV row per cell
//!   metrics   recompute metrics from a dumped representation file
//!
//! `LAB_SEED` overrides the config seed for train and sweep.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use lab_core::config::{ExperimentConfig, SweepGrid};
use lab_core::format::read_named_blocks;
use lab_core::metrics::{record_from_reps, CSV_HEADER};
use lab_core::numeric::RngSeed;
use lab_core::train::{sweep, sweep_to_csv, train_to_dir};
use lab_core::verify::{all_pass, rows_to_csv, run_verification};

#[derive(Parser)]
#[command(name = "lab", version, about = "contrastive-loss decomposition laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full identity-verification suite.
    Verify {
        /// Inject this epsilon into one decomposition component
        /// (negative control: recomposition must fail).
        #[arg(long)]
        perturb: Option<f64>,
        /// Also write the report CSV to a file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one configuration and write metrics.csv, params.txt, reps.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a sweep grid and write one CSV row per cell.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics from a dumped representation file.
    Metrics {
        #[arg(long)]
        reps: PathBuf,
        /// Measurement temperature for the local uniformities.
        #[arg(long)]
        tau: f64,
        /// Gaussian-potential scale of the global uniformity.
        #[arg(long, default_value_t = 2.0)]
        t: f64,
    },
}

fn seed_override(mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    if let Ok(s) = std::env::var("LAB_SEED") {
        let seed: u64 = s
            .parse()
            .with_context(|| format!("LAB_SEED must be an unsigned integer, got '{s}'"))?;
        cfg.dataset.seed = RngSeed(seed);
    }
    Ok(cfg)
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Verify { perturb, out } => {
            let rows = run_verification(perturb)?;
            let csv = rows_to_csv(&rows);
            print!("{csv}");
            if let Some(path) = out {
                std::fs::write(&path, &csv)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if all_pass(&rows) {
                Ok(ExitCode::SUCCESS)
            } else {
                for r in rows.iter().filter(|r| !r.pass) {
                    eprintln!("FAILED: {} (max_error {})", r.name, r.max_error);
                }
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Train { config, out } => {
            let cfg = seed_override(
                ExperimentConfig::from_file(&config)
                    .with_context(|| format!("loading {}", config.display()))?,
            )?;
            let result = train_to_dir(&cfg, &out)?;
            let last = result.final_record();
            println!(
                "trained {} for {} steps in {:.2}s: loss {} unif_local ({}, {})",
                cfg.objective,
                cfg.steps,
                result.wall_seconds,
                last.loss_total,
                last.unif_local_image,
                last.unif_local_report
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, grid, out } => {
            let cfg = seed_override(
                ExperimentConfig::from_file(&config)
                    .with_context(|| format!("loading {}", config.display()))?,
            )?;
            let grid = SweepGrid::from_file(&grid)?;
            let cells = sweep(&cfg, &grid);
            for cell in cells.iter() {
                if let Err(e) = &cell.outcome {
                    eprintln!(
                        "cell failed: objective={} tau_prime={} eta={}: {e}",
                        cell.objective, cell.tau_prime, cell.eta
                    );
                }
            }
            std::fs::create_dir_all(&out)?;
            let path = out.join("sweep.csv");
            std::fs::write(&path, sweep_to_csv(&cfg, &cells))
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {} ({} cells)", path.display(), cells.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Metrics { reps, tau, t } => {
            let text = std::fs::read_to_string(&reps)
                .with_context(|| format!("reading {}", reps.display()))?;
            let blocks = read_named_blocks(&text)?;
            let record = record_from_reps(&blocks, tau, t)?;
            println!("{CSV_HEADER},cfg_tau_metric,cfg_uniformity_t");
            println!("{},{tau},{t}", record.csv_row());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
