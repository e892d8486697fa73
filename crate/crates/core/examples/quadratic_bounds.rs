//! Federated training on a strongly convex quadratic instance, with every
//! term of the error decomposition computed in closed form and compared
//! with what training actually achieves.
//!
//! cargo run --release --example quadratic_bounds

use eefl::fedtrain::{run, LrSchedule, TrainConfig};
use eefl::models::{DataPartition, QuadraticSpec, QuadraticTask};
use eefl::strategies::{build_sampling_matrix, exit_pools, ExitWeights};
use eefl::theory::{
    alphas, bias_bound, bound_b, empirical_bias, empirical_opt_error, opt_error_bound, tv_distance,
    BoundDenominator, TheoryParams,
};
use eefl::topology::Topology;

fn main() -> eefl::Result<()> {
    let radius = 3.0;
    let tree = Topology::cloud_edge_device();
    let tree = tree.clone().with_dataset_sizes(&DataPartition::Equal.allocate(&tree, 1200)?)?;
    let task = QuadraticTask::random(&tree, &QuadraticSpec::default(), 1)?;
    let p = build_sampling_matrix(&tree, 0.1)?;
    let pools = exit_pools(&tree, &p)?;
    let served = ExitWeights::normalize(&[0.8, 0.15, 0.05])?;
    let trained = ExitWeights::normalize(&[1.0, 1.0, 1.0])?;

    let params = TheoryParams::from_quadratic(&task, &trained, &pools, radius)?;
    let b = bound_b(&params, &alphas(&trained, &pools, 1.0), &p, 4)?;
    println!("mu {:.3}, L {:.3}, M {:.3}, Gamma {:.4}", params.mu, params.smoothness, params.loss_cap, params.heterogeneity);
    println!(
        "B = {:.3e} (noise {:.3e}, heterogeneity {:.3e}, drift {:.3e}, sampling {:.3e})",
        b.total, b.noise, b.heterogeneity, b.drift, b.sampling
    );

    let w_star = task.minimizers(&trained, &pools)?.w_star;
    println!("{:>6} {:>12} {:>12}", "T", "error", "bound");
    for rounds in [10, 100, 1000] {
        let cfg = TrainConfig {
            rounds,
            local_steps: 4,
            projection_radius: radius,
            lr_schedule: LrSchedule::Theory { mu: params.mu, smoothness: params.smoothness, gamma: None },
            keep_snapshots: true,
            seed: 7,
            ..Default::default()
        };
        let out = run(&tree, &task, &trained, &p, &cfg)?;
        let w1 = &out.trajectory.snapshots[0];
        let dist_sq: f64 = w1.iter().zip(&w_star).map(|(a, b)| (a - b).powi(2)).sum();
        let error = empirical_opt_error(&task, &[out.model], &trained, &pools)?;
        let bound = opt_error_bound(&params, b.total, rounds, 4, dist_sq, BoundDenominator::LocalSteps);
        println!("{rounds:>6} {error:>12.3e} {bound:>12.3e}");
    }

    let tv = tv_distance(&trained, &served)?;
    let gap = empirical_bias(&task, &trained, &served, &pools, params.loss_cap, radius, 2000, 3);
    println!(
        "tv {tv:.4}: largest objective gap {gap:.4} <= bias bound {:.4}",
        bias_bound(params.loss_cap, &trained, &served)?
    );
    Ok(())
}
