use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eefl::experiment::{compare, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "eefl", version, about = "Federated early-exit training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment config and write results.csv.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; overrides `threads` in the config.
        #[arg(long)]
        threads: Option<usize>,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Mean per-seed difference between two strategies in a results.csv.
    Compare {
        csv: PathBuf,
        #[arg(long)]
        baseline: String,
        #[arg(long)]
        candidate: String,
        #[arg(long, default_value = "weighted_acc")]
        metric: String,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> eefl::Result<()> {
    match command {
        Command::Run {
            config,
            out,
            threads,
            seed_override,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed_override {
                cfg.seeds = vec![seed];
            }
            if threads.is_some() {
                cfg.threads = threads;
            }
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("results"));
            let output = run_experiment(&cfg, Some(&dir))?;
            println!(
                "{} rows written to {}",
                output.rows.len(),
                dir.join("results.csv").display()
            );
        }
        Command::Compare {
            csv,
            baseline,
            candidate,
            metric,
        } => {
            let rows = compare(&csv, &baseline, &candidate, &metric)?;
            println!("partition,split,k,seeds,mean_delta,std_error");
            for r in rows {
                println!(
                    "{},{},{},{},{},{}",
                    r.partition, r.split, r.k, r.seeds, r.mean_delta, r.std_error
                );
            }
        }
    }
    Ok(())
}
