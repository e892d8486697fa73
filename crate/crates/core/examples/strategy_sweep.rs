//! Runs an experiment config and summarizes serving_rate against equal
//! weighting, as the `eefl run` and `eefl compare` commands would.
//!
//! cargo run --release --example strategy_sweep -- crates/core/configs/table2_equal.toml

use std::path::PathBuf;

use eefl::experiment::{compare, run_experiment, ExperimentConfig};

fn main() -> eefl::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/table2_equal.toml")));
    let config = ExperimentConfig::load(&path)?;
    let out_dir = std::env::temp_dir().join("eefl_strategy_sweep");
    let output = run_experiment(&config, Some(&out_dir))?;
    let csv = output.results_path.expect("output directory was given");
    println!("{} rows in {}", output.rows.len(), csv.display());

    for row in &output.rows {
        println!(
            "seed {} {:<18} {:<9} {:<14} k={:<4} weighted {}",
            row.seed,
            row.partition,
            row.split,
            row.strategy,
            row.k,
            row.weighted_acc.map_or("-".into(), |a| format!("{a:.4}"))
        );
    }
    if config.task.kind == eefl::experiment::TaskKind::Mlp {
        for c in compare(&csv, "equal", "serving_rate", "weighted_acc")? {
            println!(
                "{} {} k={}: serving_rate - equal = {:+.4} +/- {:.4} over {} seeds",
                c.partition, c.split, c.k, c.mean_delta, c.std_error, c.seeds
            );
        }
    }
    Ok(())
}
