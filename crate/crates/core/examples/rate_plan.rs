//! Serving rates on the cloud/edge/device tree: budgets derived from a
//! target split, the resulting per-node flows, and a check that the
//! saturating plan is optimal on a small chain.
//!
//! cargo run --release --example rate_plan -- 60-30-10

use eefl::experiment::Split;
use eefl::topology::{
    brute_force_rate_plan, budgets_for_split, compute_rate_plan, grid_search_p1, p1_objective, Topology,
};

fn main() -> eefl::Result<()> {
    let split: Split = std::env::args().nth(1).as_deref().unwrap_or("80-15-5").parse()?;
    let base = Topology::cloud_edge_device();
    let budgets = budgets_for_split(&base, &split.shares)?;
    let tree = base.with_budgets(&budgets)?;
    let plan = compute_rate_plan(&tree);
    let inflow = plan.inflow(&tree);

    println!("split {split}");
    println!("{:>4} {:>4} {:>8} {:>8} {:>8} {:>8} {:>6}", "id", "exit", "arrival", "budget", "inflow", "forward", "serve");
    for (i, node) in tree.nodes().iter().enumerate() {
        println!(
            "{:>4} {:>4} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>6.3}",
            node.id, node.exit, node.arrival_rate, node.budget, inflow[i], plan.transmit[i], plan.fraction[i]
        );
    }
    println!("per-exit serving share {:.4?}", plan.lambda_exit_normalized);

    let slow = brute_force_rate_plan(&tree)?;
    let gap = plan
        .transmit
        .iter()
        .zip(&slow.transmit)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("fixed-point iteration agrees to {gap:.1e}");

    let chain = Topology::chain(&[1.0, 0.2, 0.0], &[0.5, 0.25])?;
    let losses = [0.9, 0.6, 0.3];
    let saturating = p1_objective(&chain, &compute_rate_plan(&chain), &losses);
    let grid = grid_search_p1(&chain, &losses, 0.05)?;
    println!(
        "chain: saturating objective {saturating:.4}, best grid point {:.4} at fractions {:.2?}",
        grid.objective, grid.fractions
    );
    Ok(())
}
