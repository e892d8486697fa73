//! Aggregation weights of every strategy, and the sampling matrix and
//! training pools that a given `k` induces on the seven-node tree.
//!
//! cargo run --release --example strategies -- 0.2

use eefl::models::{DataPartition, MlpArch};
use eefl::strategies::{build_sampling_matrix, exit_pools, Strategy};
use eefl::topology::Topology;

fn main() -> eefl::Result<()> {
    let k: f64 = std::env::args().nth(1).map_or(Ok(0.2), |s| s.parse()).expect("k must be a number");
    let tree = Topology::cloud_edge_device();
    let sizes = DataPartition::CloudBiasStrong.allocate(&tree, 1200)?;
    let tree = tree.with_dataset_sizes(&sizes)?;
    let p = build_sampling_matrix(&tree, k)?;
    let pools = exit_pools(&tree, &p)?;

    println!("dataset sizes {sizes:?}");
    println!("sampling matrix (k = {k}):");
    for (c, row) in p.rows().iter().enumerate() {
        println!("  client {c} (exit {}): {row:.2?}", tree.nodes()[c].exit);
    }
    println!("pool sizes per exit {:?}", pools.sizes);

    let arch = MlpArch::new(16, 32, 3, 3);
    let flops: Vec<f64> = (1..=3).map(|e| arch.flops(e)).collect();
    let served = [0.8, 0.15, 0.05];
    println!("exit FLOPS {flops:?}, served split {served:?}");
    for s in [
        Strategy::Equal,
        Strategy::FlopsProp,
        Strategy::FlopsInverse,
        Strategy::ServingRate,
        Strategy::GenErrorAdj,
    ] {
        let w = s.weights(&served, &pools, &flops)?;
        println!("  {:<14} {:.4?}", s.name(), w.weights);
    }
    Ok(())
}
