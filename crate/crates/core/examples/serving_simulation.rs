//! Routes a labeled test stream through the tree with a trained model and
//! compares confidence-based and random selection of the samples each
//! node answers locally.
//!
//! cargo run --release --example serving_simulation

use eefl::experiment::{serving_setup, Serving, Split};
use eefl::fedtrain::{run, LrSchedule, TrainConfig};
use eefl::models::{generate_classification_data, ClassificationSpec, DataPartition};
use eefl::serving::{simulate_serving, Ranking};
use eefl::strategies::{build_sampling_matrix, serving_rate_weights};
use eefl::topology::Topology;

fn main() -> eefl::Result<()> {
    let split: Split = "60-30-10".parse()?;
    let (tree, plan, _) = serving_setup(&Topology::cloud_edge_device(), &Serving::Split(split))?;
    let partition = DataPartition::Equal;
    let tree = tree.clone().with_dataset_sizes(&partition.allocate(&tree, 1200)?)?;
    let task = generate_classification_data(&ClassificationSpec::default(), &tree, &partition, 1200, 1)?;
    let p = build_sampling_matrix(&tree, 0.0)?;
    let cfg = TrainConfig {
        rounds: 10,
        local_steps: 10,
        lr_schedule: LrSchedule::Cosine { lr: 0.1 },
        ..Default::default()
    };
    let model = run(&tree, &task, &serving_rate_weights(&plan)?, &p, &cfg)?.model;

    for ranking in [Ranking::Entropy, Ranking::Random { seed: 5 }] {
        let out = simulate_serving(&tree, &plan, &task.arch, &model, &task.test, ranking)?;
        println!("{ranking:?}: system accuracy {:.4}", out.system_accuracy);
        for node in &out.nodes {
            println!(
                "  node {} (exit {}): received {:>4}, served {:>4}, correct {:>4}",
                node.id,
                node.exit,
                node.inflow,
                node.served.len(),
                node.correct
            );
        }
        let gaps: Vec<String> = out
            .distribution_gap
            .iter()
            .map(|g| g.map_or("-".into(), |g| format!("{g:+.3}")))
            .collect();
        println!("  served minus i.i.d. accuracy per exit: {}", gaps.join(", "));
    }
    Ok(())
}
