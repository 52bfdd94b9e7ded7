use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use poisson_cv::ExperimentConfig;

/// Poisson-equation control variates for Metropolis-Hastings averages.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (m, k) cell and write results.csv and results.txt.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write diagnostics.csv: bound terms next to the observed k * MSE.
    Diagnose {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print a built-in configuration as TOML.
    Preset { name: Preset },
}

#[derive(clap::Args)]
struct Overrides {
    /// Replace the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    #[value(name = "double-well-1d")]
    DoubleWell1d,
    #[value(name = "double-well-2d")]
    DoubleWell2d,
}

fn load(path: &PathBuf, o: &Overrides) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path).with_context(|| format!("{}", path.display()))?;
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &o.out {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let cells = poisson_cv::run_experiment(&cfg)?;
            print!("{}", poisson_cv::experiment::format_table(&cells));
            log::info!("wrote {}", cfg.output.join("results.csv").display());
        }
        Command::Diagnose { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let rows = poisson_cv::run_diagnostics(&cfg)?;
            println!("{:>6} {:>12} {:>12} {:>12} {:>12}", "m", "mass", "mesh^2", "driver", "k*mse");
            for r in rows {
                println!(
                    "{:>6} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
                    r.m, r.rate.mass, r.rate.mesh_squared, r.rate.driver, r.controlled_mse_k
                );
            }
            log::info!("wrote {}", cfg.output.join("diagnostics.csv").display());
        }
        Command::Preset { name } => {
            let cfg = match name {
                Preset::DoubleWell1d => ExperimentConfig::double_well_1d(),
                Preset::DoubleWell2d => ExperimentConfig::double_well_2d(),
            };
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
