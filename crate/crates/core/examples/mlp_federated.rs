//! Trains the three-exit MLP with equal and serving-rate weights on the
//! same data and reports per-exit and serving-weighted test accuracy.
//!
//! cargo run --release --example mlp_federated -- 80-15-5

use eefl::experiment::Split;
use eefl::fedtrain::{run, LrSchedule, TrainConfig};
use eefl::models::{exit_accuracy, generate_classification_data, ClassificationSpec, DataPartition};
use eefl::serving::weighted_quality;
use eefl::strategies::{build_sampling_matrix, exit_pools, Strategy};
use eefl::topology::Topology;

fn main() -> eefl::Result<()> {
    let split: Split = std::env::args().nth(1).as_deref().unwrap_or("80-15-5").parse()?;
    let tree = Topology::cloud_edge_device();
    let partition = DataPartition::Equal;
    let tree = tree.clone().with_dataset_sizes(&partition.allocate(&tree, 1200)?)?;
    let p = build_sampling_matrix(&tree, 0.0)?;
    let pools = exit_pools(&tree, &p)?;

    for strategy in [Strategy::Equal, Strategy::ServingRate] {
        let mut mean = 0.0;
        for seed in 1..=3 {
            let task = generate_classification_data(&ClassificationSpec::default(), &tree, &partition, 1200, seed)?;
            let weights = strategy.weights(&split.shares, &pools, &task.flops())?;
            let cfg = TrainConfig {
                rounds: 10,
                local_steps: 10,
                lr_schedule: LrSchedule::Cosine { lr: 0.1 },
                seed,
                ..Default::default()
            };
            let model = run(&tree, &task, &weights, &p, &cfg)?.model;
            let acc = (1..=3)
                .map(|e| exit_accuracy(&task.arch, &model, e, &task.test))
                .collect::<eefl::Result<Vec<_>>>()?;
            let weighted = weighted_quality(&acc, &split.shares)?;
            mean += weighted / 3.0;
            println!("{:<13} seed {seed}: exits {acc:.3?}, weighted {weighted:.4}", strategy.name());
        }
        println!("{:<13} mean weighted accuracy on {split}: {mean:.4}", strategy.name());
    }
    Ok(())
}
