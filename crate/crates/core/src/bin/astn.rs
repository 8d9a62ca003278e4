//! Command-line driver: `astn generate | run | report`.
//!
//! Exit codes: 0 success, 1 runtime failure (including failed sweep cells),
//! 2 configuration or usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use astn_diffusion::config::ExperimentConfig;
use astn_diffusion::experiment::{cmd_generate, cmd_report, cmd_run, METRICS_FILE};
use astn_diffusion::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "astn", version, about = "AST-n diffusion sampling experiments")]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Master seed, overriding the config.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for the sweep (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write phantom / low-dose pairs and their manifest under OUT/dataset.
    Generate,
    /// Run the regime sweep on OUT/dataset.
    Run,
    /// Render a metrics CSV (default OUT/metrics.csv) as a table.
    Report {
        #[arg(value_name = "CSV")]
        metrics: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<ExitCode, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Generate => {
            let s = cmd_generate(&cfg, &cli.out, cli.force)?;
            println!("wrote {} pairs; manifest {}", s.pairs, s.manifest.display());
        }
        Command::Run => {
            let s = cmd_run(&cfg, &cli.out, cli.force)?;
            println!("wrote {} rows to {}", s.report.len(), s.metrics.display());
            if !s.failures.is_empty() {
                for f in &s.failures {
                    eprintln!(
                        "cell {} ({} {} {}): {}",
                        f.cell, f.regime, f.sampler, f.steps, f.message
                    );
                }
                eprintln!("error: {} sweep cells failed", s.failures.len());
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report { metrics } => {
            let csv = metrics.unwrap_or_else(|| cli.out.join(METRICS_FILE));
            print!("{}", cmd_report(&csv, &cli.out, cfg.schedule.steps)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
