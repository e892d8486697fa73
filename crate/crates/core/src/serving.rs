//! Replays a labeled test stream through the tree. Each node ranks the
//! samples it receives by confidence at its own exit, answers the easiest
//! fraction prescribed by the rate plan, and forwards the rest upward.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::data::largest_remainder;
use crate::models::mlp::{exit_accuracy, log_sum_exp, softmax};
use crate::models::{Dataset, MlpArch};
use crate::rng::{self, tag};
use crate::topology::{RatePlan, Topology};

/// Shannon entropy of the exit's softmax output; lower is more confident.
pub fn confidence(arch: &MlpArch, w: &[f64], exit: usize, x: &[f64]) -> f64 {
    entropy(&softmax(&arch.logits(w, x, exit)))
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// How a node orders its incoming samples before serving the first ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Ranking {
    /// Lowest entropy first, ties by sample index.
    Entropy,
    /// Uniformly random order from a stream keyed by `(seed, node)`.
    Random { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeServing {
    pub id: u32,
    pub exit: usize,
    pub inflow: usize,
    /// Indices into the test stream, in ranking order.
    #[serde(skip_serializing)]
    pub served: Vec<usize>,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ServingOutcome {
    pub nodes: Vec<NodeServing>,
    pub exit_served: Vec<usize>,
    /// Accuracy and mean cross-entropy on the samples each exit served;
    /// `None` when an exit served nothing.
    pub exit_accuracy: Vec<Option<f64>>,
    pub exit_loss: Vec<Option<f64>>,
    /// Accuracy of every exit on the whole stream.
    pub iid_accuracy: Vec<f64>,
    /// `served - iid` accuracy per exit: how far routing moves each exit's
    /// serving distribution from the input distribution.
    pub distribution_gap: Vec<Option<f64>>,
    /// `lambda`-weighted exit accuracy, over exits that served something.
    pub system_accuracy: f64,
    pub system_loss: f64,
}

/// `sum_e metric_e * lambda_e / sum_e lambda_e`.
pub fn weighted_quality(metrics: &[f64], lambda: &[f64]) -> Result<f64> {
    let total: f64 = lambda.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroTraffic);
    }
    Ok(metrics.iter().zip(lambda).map(|(m, l)| m * l).sum::<f64>() / total)
}

/// Bankers' rounding of `x >= 0`.
fn round_half_even(x: f64) -> usize {
    let r = x.round_ties_even();
    r.max(0.0) as usize
}

/// Splits stream indices `0..n` across nodes in proportion to their
/// arrival rates, as contiguous blocks in node order.
pub fn assign_stream(topology: &Topology, n: usize) -> Result<Vec<Vec<usize>>> {
    let total = topology.total_arrival();
    if !(total > 0.0) {
        return Err(Error::ZeroTraffic);
    }
    let quotas: Vec<f64> = topology
        .nodes()
        .iter()
        .map(|node| node.arrival_rate / total * n as f64)
        .collect();
    let counts = largest_remainder(&quotas, n);
    let mut next = 0;
    Ok(counts
        .into_iter()
        .map(|c| {
            let block = (next..next + c).collect();
            next += c;
            block
        })
        .collect())
}

/// Routes `stream` through the tree under `plan` and scores every served
/// sample at the exit of the node that served it.
pub fn simulate_serving(
    topology: &Topology,
    plan: &RatePlan,
    arch: &MlpArch,
    w: &[f64],
    stream: &Dataset,
    ranking: Ranking,
) -> Result<ServingOutcome> {
    if stream.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_exits = topology.num_exits();
    let mut pending = assign_stream(topology, stream.len())?;
    let mut nodes: Vec<Option<NodeServing>> = vec![None; topology.len()];
    let mut exit_correct = vec![0usize; n_exits];
    let mut exit_served = vec![0usize; n_exits];
    let mut exit_loss_sum = vec![0.0; n_exits];

    for &i in topology.post_order() {
        let node = &topology.nodes()[i];
        let mut pool = std::mem::take(&mut pending[i]);
        pool.sort_unstable();
        match ranking {
            Ranking::Entropy => {
                let mut keyed: Vec<(f64, usize)> = pool
                    .iter()
                    .map(|&s| (confidence(arch, w, node.exit, stream.row(s)), s))
                    .collect();
                keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                pool = keyed.into_iter().map(|(_, s)| s).collect();
            }
            Ranking::Random { seed } => {
                let mut rng = rng::stream(seed, &[tag::RANKING, node.id as u64]);
                pool.shuffle(&mut rng);
            }
        }
        let inflow = pool.len();
        let count = match topology.parent(i) {
            None => inflow,
            Some(_) => round_half_even(plan.fraction[i] * inflow as f64).min(inflow),
        };
        let forwarded = pool.split_off(count);
        if let Some(parent) = topology.parent(i) {
            pending[parent].extend(forwarded);
        }
        let mut correct = 0;
        for &s in &pool {
            let logits = arch.logits(w, stream.row(s), node.exit);
            let y = stream.labels[s];
            let pred = logits
                .iter()
                .enumerate()
                .fold(0, |best, (k, &v)| if v > logits[best] { k } else { best });
            if pred == y {
                correct += 1;
            }
            exit_loss_sum[node.exit - 1] += log_sum_exp(&logits) - logits[y];
        }
        exit_correct[node.exit - 1] += correct;
        exit_served[node.exit - 1] += pool.len();
        nodes[i] = Some(NodeServing {
            id: node.id,
            exit: node.exit,
            inflow,
            served: pool,
            correct,
        });
    }

    let served_accuracy: Vec<Option<f64>> = (0..n_exits)
        .map(|e| (exit_served[e] > 0).then(|| exit_correct[e] as f64 / exit_served[e] as f64))
        .collect();
    let exit_loss: Vec<Option<f64>> = (0..n_exits)
        .map(|e| (exit_served[e] > 0).then(|| exit_loss_sum[e] / exit_served[e] as f64))
        .collect();
    let iid_accuracy = (1..=n_exits)
        .map(|e| exit_accuracy(arch, w, e, stream))
        .collect::<Result<Vec<_>>>()?;
    let distribution_gap = served_accuracy
        .iter()
        .zip(&iid_accuracy)
        .map(|(s, i)| s.map(|s| s - i))
        .collect();

    let active_lambda: Vec<f64> = (0..n_exits)
        .map(|e| if exit_served[e] > 0 { plan.lambda_exit[e] } else { 0.0 })
        .collect();
    let acc: Vec<f64> = served_accuracy.iter().map(|a| a.unwrap_or(0.0)).collect();
    let loss: Vec<f64> = exit_loss.iter().map(|a| a.unwrap_or(0.0)).collect();
    let system_accuracy = weighted_quality(&acc, &active_lambda)?;
    let system_loss = weighted_quality(&loss, &active_lambda)?;

    Ok(ServingOutcome {
        nodes: nodes.into_iter().map(|n| n.expect("every node visited")).collect(),
        exit_served,
        exit_accuracy: served_accuracy,
        exit_loss,
        iid_accuracy,
        distribution_gap,
        system_accuracy,
        system_loss,
    })
}
