//! `qfit`: simulate diffusion MRI data, train MSE and NLR networks, and
//! evaluate them against ground truth and classical fits.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use qfit_core::ModelKind;

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "qfit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Divide n_train and n_test by this factor.
    #[arg(long, global = true)]
    scale: Option<usize>,

    /// Run a single SNR instead of the configured list.
    #[arg(long, global = true)]
    snr: Option<f64>,

    /// Override the signal model.
    #[arg(long, global = true)]
    model: Option<ModelKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test datasets for every SNR.
    Simulate,
    /// Pick a common initialisation, then train one MSE and one NLR network per SNR.
    Train,
    /// Score the trained networks on the test split.
    Evaluate,
    /// Fit test voxels with per-voxel MLE and least squares.
    Fitref,
    /// Compare ln I0 implementations against a high-precision reference.
    BesselCheck,
    /// Print the full-scale configuration for a model as TOML.
    DefaultConfig,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().context("--config <path> is required for this command")?;
    ExperimentConfig::load(path)?.with_overrides(cli.scale, cli.snr, cli.model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate => commands::simulate(&load_config(&cli)?),
        Command::Train => commands::train_networks(&load_config(&cli)?),
        Command::Evaluate => commands::evaluate(&load_config(&cli)?),
        Command::Fitref => commands::fitref(&load_config(&cli)?),
        Command::BesselCheck => {
            let config = match cli.config {
                Some(_) => Some(load_config(&cli)?),
                None => None,
            };
            commands::bessel_check(config.as_ref())
        }
        Command::DefaultConfig => {
            let config = ExperimentConfig::reference(cli.model.unwrap_or(ModelKind::Adc));
            print!("{}", config.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
