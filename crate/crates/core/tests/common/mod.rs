#![allow(dead_code)]

use eefl::models::DataPartition;
use eefl::rng::StreamRng;
use eefl::topology::{NodeSpec, Topology};
use rand::Rng;

/// Random tree with at most `max_nodes` nodes. Exits are assigned by a
/// random strictly decreasing walk from the root and then compacted to
/// `1..=E`, so every exit is deployed somewhere.
pub fn random_tree(rng: &mut StreamRng, max_nodes: usize) -> Topology {
    let n = rng.random_range(1..=max_nodes);
    let mut raw_exit = vec![0usize; n];
    let mut parent = vec![None; n];
    raw_exit[0] = 2 * n + 1;
    for i in 1..n {
        let candidates: Vec<usize> = (0..i).filter(|&j| raw_exit[j] > 1).collect();
        let p = candidates[rng.random_range(0..candidates.len())];
        parent[i] = Some(p);
        raw_exit[i] = rng.random_range(1..raw_exit[p]);
    }
    let mut distinct = raw_exit.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let nodes = (0..n)
        .map(|i| NodeSpec {
            arrival_rate: if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..2.0) },
            budget: match rng.random_range(0..4) {
                0 => 0.0,
                1 => 1e6,
                _ => rng.random_range(0.0..3.0),
            },
            dataset_size: 1,
            ..NodeSpec::new(
                i as u32,
                parent[i].map(|p| p as u32),
                distinct.binary_search(&raw_exit[i]).unwrap() + 1,
            )
        })
        .collect();
    Topology::new(nodes, distinct.len()).unwrap()
}

/// The seven-node tree with the equal partition of `total` samples.
pub fn figure_tree(total: usize) -> Topology {
    let t = Topology::cloud_edge_device();
    let sizes = DataPartition::Equal.allocate(&t, total).unwrap();
    t.with_dataset_sizes(&sizes).unwrap()
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(1.0f64, |m, x| m.max(x.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
