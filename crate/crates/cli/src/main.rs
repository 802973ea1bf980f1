use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rdrl_core::harness::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "rdrl", version, about = "Residual deep RL for inverter Volt-Var control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Train on the long schedule instead of the configured day count.
        #[arg(long)]
        full: bool,
    },
    /// Tabulate final-window results of several finished runs as CSV.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value_t = harness::DEFAULT_WINDOW)]
        window: usize,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the scenario profile a config would train on.
    ExportFixtures {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: &PathBuf, full: bool) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)
        .with_context(|| format!("loading {}", path.display()))?;
    cfg.full_schedule |= full;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, full } => {
            let cfg = load(&config, full)?;
            let out = harness::run(&cfg)?;
            if out.reused {
                log::info!("nothing to do, {} is complete", out.dir.display());
            } else {
                log::info!("wrote {} metric rows to {}", out.rows.len(), out.dir.display());
            }
        }
        Command::Compare { runs, window, out } => {
            let table = harness::compare_window(&runs, window)?;
            match out {
                Some(p) => {
                    let f = std::fs::File::create(&p)
                        .with_context(|| format!("creating {}", p.display()))?;
                    harness::write_comparison(f, &table)?;
                }
                None => harness::write_comparison(std::io::stdout().lock(), &table)?,
            }
        }
        Command::ExportFixtures { config } => {
            let cfg = load(&config, false)?;
            let p = harness::export_fixtures(&cfg)?;
            println!("{}", p.display());
        }
    }
    Ok(())
}
