use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use perfmpg_core::experiment::{emit_game, run_experiment, run_verify, ExperimentConfig};
use perfmpg_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUN: u8 = 3;
const EXIT_VIOLATION: u8 = 4;

#[derive(Parser)]
#[command(name = "perfmpg", version, about = "Experiments on performative Markov potential games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment and write metric CSVs and a manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated replication seeds, overriding `seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Dotted `key=value` override, e.g. `alg.eta=0.0003`. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write the environment's base game and its uniform-policy deployment as JSON.
    EmitGame {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the sensitivity, value-bound, stability and gradient sweeps.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

/// Failure classes, each with its own exit status.
enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
    Violation(String),
}

fn classify(err: Error) -> Failure {
    match err {
        Error::Config(_) | Error::Parse(_) => Failure::Config(err.into()),
        other => Failure::Run(other.into()),
    }
}

fn load(path: &PathBuf, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::parse_file(path, overrides).map_err(|e| match e {
        Error::Io(io) => Failure::Config(anyhow::Error::new(io).context(format!("reading {}", path.display()))),
        other => classify(other),
    })
}

fn configure_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("PERFMPG_THREADS") {
        let n: usize = raw
            .parse()
            .with_context(|| format!("PERFMPG_THREADS must be a positive integer, got {raw:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn execute(command: Command) -> Result<(), Failure> {
    configure_threads().map_err(Failure::Config)?;
    match command {
        Command::Run {
            config,
            out,
            seeds,
            overrides,
        } => {
            let mut overrides = overrides;
            if let Some(dir) = out {
                overrides.push(format!("output_dir={}", serde_json::to_string(&dir).map_err(|e| Failure::Config(e.into()))?));
            }
            if let Some(seeds) = seeds {
                overrides.push(format!("seeds={seeds:?}"));
            }
            let cfg = load(&config, &overrides)?;
            let manifest = run_experiment(&cfg).map_err(classify)?;
            for s in &manifest.seeds {
                println!(
                    "seed {}: {} rounds, final pse_gap {:.6e}, best {:.6e} at round {}",
                    s.seed, s.rounds, s.final_pse_gap, s.best_iterate_gap, s.best_iterate_round
                );
                for w in &s.warnings {
                    eprintln!("warning (seed {}): {w}", s.seed);
                }
            }
            println!("wrote {}", cfg.output_dir.display());
            Ok(())
        }
        Command::EmitGame { config, out } => {
            let cfg = load(&config, &[])?;
            let (base, snapshot) = emit_game(&cfg, &out).map_err(classify)?;
            println!("wrote {} and {}", base.display(), snapshot.display());
            Ok(())
        }
        Command::Verify { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let report = run_verify(&cfg).map_err(classify)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Run(e.into()))?;
            println!("{json}");
            for note in &report.skipped {
                eprintln!("skipped: {note}");
            }
            if report.violations > 0 {
                return Err(Failure::Violation(format!("{} violations", report.violations)));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUN)
        }
        Err(Failure::Violation(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(EXIT_VIOLATION)
        }
    }
}
