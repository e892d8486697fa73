//! Training tasks: a closed-form quadratic testbed and an early-exit MLP on
//! synthetic teacher-labeled data.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::strategies::{ExitPools, ExitWeights};

pub mod data;
pub mod mlp;
pub mod quadratic;

pub use data::{generate_classification_data, ClassificationSpec, DataPartition, Dataset};
pub use mlp::{exit_accuracy, ClassificationTask, MlpArch};
pub use quadratic::{QuadraticOptimum, QuadraticSpec, QuadraticTask};

/// Where each backbone block and each exit head lives in the flat
/// parameter vector. Exit `e` uses blocks `1..=e` and head `e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentMap {
    pub dim: usize,
    pub blocks: Vec<Range<usize>>,
    pub heads: Vec<Range<usize>>,
}

impl SegmentMap {
    /// Single block covering every coordinate and empty heads: every exit
    /// is active everywhere.
    pub fn shared(dim: usize, num_exits: usize) -> Self {
        let blocks = (0..num_exits).map(|e| if e == 0 { 0..dim } else { dim..dim }).collect();
        Self {
            dim,
            blocks,
            heads: (0..num_exits).map(|_| dim..dim).collect(),
        }
    }

    pub fn num_exits(&self) -> usize {
        self.heads.len()
    }

    /// Ranges touched by exit `exit` (1-based).
    pub fn active_ranges(&self, exit: usize) -> impl Iterator<Item = Range<usize>> + '_ {
        self.blocks[..exit]
            .iter()
            .cloned()
            .chain(std::iter::once(self.heads[exit - 1].clone()))
            .filter(|r| !r.is_empty())
    }

    pub fn active_mask(&self, exit: usize) -> Vec<bool> {
        let mut mask = vec![false; self.dim];
        for r in self.active_ranges(exit) {
            mask[r].fill(true);
        }
        mask
    }
}

/// Per-(client, exit) local objectives that federated training operates on.
pub trait Task: Sync {
    fn dim(&self) -> usize;
    fn num_exits(&self) -> usize;
    fn segments(&self) -> &SegmentMap;
    fn num_clients(&self) -> usize;
    /// `|S_c|`, the number of samples the client draws batches from.
    fn client_size(&self, client: usize) -> usize;
    /// Mini-batch gradient of `F_{c,e}` at `w`, written to `out`. Entries
    /// outside the exit's active set are zero.
    fn batch_gradient(
        &self,
        w: &[f64],
        client: usize,
        exit: usize,
        batch: &[usize],
        rng: &mut StreamRng,
        out: &mut [f64],
    );
    /// Empirical loss `F_{c,e}(w)`.
    fn client_loss(&self, w: &[f64], client: usize, exit: usize) -> f64;
    fn init_params(&self, rng: &mut StreamRng) -> Vec<f64>;
}

/// `sum_e weight_e * sum_{c in C_e} |S_c|/|S_e| * F_{c,e}(w)`.
pub fn weighted_objective(task: &dyn Task, w: &[f64], weights: &ExitWeights, pools: &ExitPools) -> Result<f64> {
    if weights.weights.iter().all(|&x| x == 0.0) {
        return Err(Error::AllZero);
    }
    let mut total = 0.0;
    for (e, &lw) in weights.weights.iter().enumerate() {
        if lw == 0.0 {
            continue;
        }
        let exit = e + 1;
        let inner: f64 = pools.clients[e]
            .iter()
            .map(|&c| pools.share(c, exit) * task.client_loss(w, c, exit))
            .sum();
        total += lw * inner;
    }
    Ok(total)
}
