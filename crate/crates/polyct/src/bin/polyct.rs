//! Thin command-line front end over the library's experiment drivers.
//!
//! Exit codes: 0 success, 2 configuration error, 3 solver divergence in a
//! non-sweep run, 1 anything else.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use polyct::error::Error;
use polyct::experiments::{
    self, build_theory_report, load_config, run_contrast_recovery, run_ct_intensity_sweep,
    run_ct_views_sweep, run_gaussian_samples_sweep, run_reconstruct, ExperimentConfig,
    ReconstructConfig, SimulateConfig,
};
use polyct::geometry::make_pmma_phantom;

#[derive(Parser)]
#[command(name = "polyct", about = "Polychromatic CT simulation and reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate noisy measurements of the PMMA phantom.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one reconstruction and write its trace and image.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a batch sweep scenario from a config file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the theory report for a problem instance as JSON.
    Theory {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the phantom image as PGM and CSV.
    Phantom {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_required<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("cannot parse {}: {e}", path.display())))
}

fn load_json<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, Error> {
    match path {
        None => Ok(T::default()),
        Some(p) => load_required(p),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg: SimulateConfig = load_json(&config)?;
            let sim = experiments::simulate(&cfg)?;
            std::fs::create_dir_all(&out)?;
            sim.truth.write_pgm(&out.join("phantom.pgm"))?;
            sim.truth.write_csv(&out.join("phantom.csv"))?;
            sim.matrix.write_csv(&out.join("matrix.csv"))?;
            experiments::write_measurements(&sim.counts, &out.join("counts.csv"))?;
            std::fs::write(
                out.join("spectra.json"),
                serde_json::to_string_pretty(&sim.spectra.to_json())?,
            )?;
            println!("wrote phantom, matrix, spectra and counts to {}", out.display());
            Ok(())
        }
        Command::Reconstruct { config, out } => {
            let cfg: ReconstructConfig = load_required(&config)?;
            let result = run_reconstruct(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
            Ok(())
        }
        Command::Sweep { config, out } => {
            match load_config(&config)? {
                ExperimentConfig::CtViewsSweep(cfg) => {
                    run_ct_views_sweep(&cfg, &out)?;
                }
                ExperimentConfig::CtIntensitySweep(cfg) => {
                    run_ct_intensity_sweep(&cfg, &out)?;
                }
                ExperimentConfig::GaussianSamplesSweep(cfg) => {
                    run_gaussian_samples_sweep(&cfg, &out)?;
                }
                ExperimentConfig::ContrastRecovery(cfg) => {
                    run_contrast_recovery(&cfg, &out)?;
                }
                ExperimentConfig::TheoryReport(cfg) => {
                    let report = build_theory_report(&cfg)?;
                    std::fs::create_dir_all(&out)?;
                    std::fs::write(
                        out.join("theory.json"),
                        serde_json::to_string_pretty(&report.to_json())?,
                    )?;
                }
            }
            println!("sweep results written to {}", out.display());
            Ok(())
        }
        Command::Theory { config } => {
            let cfg = load_json(&config)?;
            let report = build_theory_report(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report.to_json())?);
            Ok(())
        }
        Command::Phantom { config, out } => {
            #[derive(serde::Deserialize)]
            struct PhantomConfig {
                grid_side: usize,
            }
            impl Default for PhantomConfig {
                fn default() -> Self {
                    Self { grid_side: 25 }
                }
            }
            let cfg: PhantomConfig = load_json(&config)?;
            let phantom = make_pmma_phantom(cfg.grid_side)?;
            std::fs::create_dir_all(&out)?;
            phantom.write_pgm(&out.join("phantom.pgm"))?;
            phantom.write_csv(&out.join("phantom.csv"))?;
            println!("wrote phantom to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_)
                | Error::Validation(_)
                | Error::Json(_)
                | Error::DimensionMismatch { .. } => 2,
                Error::Divergence { .. } => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
