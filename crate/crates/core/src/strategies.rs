//! Aggregation weights over exits and the client/exit sampling matrix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{RatePlan, Topology};

/// Per-exit weights (index `exit - 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitWeights {
    pub weights: Vec<f64>,
    pub normalized: bool,
}

impl ExitWeights {
    /// Normalizes nonnegative raw weights to sum to one.
    pub fn normalize(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::InvalidWeights("no exits".into()));
        }
        if raw.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidWeights(format!("negative or non-finite entry in {raw:?}")));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::AllZero);
        }
        // Dividing by an exact 1.0 is a no-op; skipping it keeps weights
        // that were already normalized bit-identical.
        let weights = if sum == 1.0 {
            raw.to_vec()
        } else {
            raw.iter().map(|w| w / sum).collect()
        };
        Ok(Self {
            weights,
            normalized: true,
        })
    }

    /// Weights taken as given, without normalization.
    pub fn raw(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidWeights(format!("negative entry in {weights:?}")));
        }
        Ok(Self {
            weights,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, exit: usize) -> f64 {
        self.weights[exit - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

pub fn equal_weight(num_exits: usize) -> ExitWeights {
    ExitWeights {
        weights: vec![1.0 / num_exits as f64; num_exits],
        normalized: true,
    }
}

/// Weights proportional to per-exit FLOPS.
pub fn flops_prop(flops: &[f64]) -> Result<ExitWeights> {
    check_flops(flops)?;
    ExitWeights::normalize(flops)
}

/// Weights inversely proportional to per-exit FLOPS.
pub fn flops_inverse(flops: &[f64]) -> Result<ExitWeights> {
    check_flops(flops)?;
    let inv: Vec<f64> = flops.iter().map(|f| 1.0 / f).collect();
    ExitWeights::normalize(&inv)
}

fn check_flops(flops: &[f64]) -> Result<()> {
    if flops.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::InvalidWeights(format!("FLOPS must be positive: {flops:?}")));
    }
    Ok(())
}

/// Weights equal to the anticipated per-exit serving rates.
pub fn serving_rate_weights(plan: &RatePlan) -> Result<ExitWeights> {
    from_rates(&plan.lambda_exit)
}

/// Normalizes a vector of per-exit serving rates.
pub fn from_rates(rates: &[f64]) -> Result<ExitWeights> {
    match ExitWeights::normalize(rates) {
        Err(Error::AllZero) => Err(Error::ZeroTraffic),
        other => other,
    }
}

/// `rate_e * pool_e / flops_e`, normalized. FLOPS stand in for the
/// capacity of each exit's hypothesis class.
pub fn gen_error_adjusted(rates: &[f64], pool_sizes: &[usize], flops: &[f64]) -> Result<ExitWeights> {
    check_flops(flops)?;
    if rates.len() != pool_sizes.len() || rates.len() != flops.len() {
        return Err(Error::InvalidWeights("length mismatch".into()));
    }
    let raw: Vec<f64> = rates
        .iter()
        .zip(pool_sizes)
        .zip(flops)
        .map(|((r, &s), f)| r * s as f64 / f)
        .collect();
    ExitWeights::normalize(&raw)
}

/// Named weighting strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Equal,
    FlopsProp,
    FlopsInverse,
    ServingRate,
    GenErrorAdj,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Equal => "equal",
            Strategy::FlopsProp => "flops_prop",
            Strategy::FlopsInverse => "flops_inverse",
            Strategy::ServingRate => "serving_rate",
            Strategy::GenErrorAdj => "gen_error_adj",
        }
    }

    /// Builds the weights for this strategy from serving rates, pool sizes
    /// and per-exit FLOPS.
    pub fn weights(self, rates: &[f64], pools: &ExitPools, flops: &[f64]) -> Result<ExitWeights> {
        match self {
            Strategy::Equal => Ok(equal_weight(rates.len())),
            Strategy::FlopsProp => flops_prop(flops),
            Strategy::FlopsInverse => flops_inverse(flops),
            Strategy::ServingRate => from_rates(rates),
            Strategy::GenErrorAdj => gen_error_adjusted(rates, &pools.sizes, flops),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "equal" => Strategy::Equal,
            "flops_prop" => Strategy::FlopsProp,
            "flops_inverse" => Strategy::FlopsInverse,
            "serving_rate" => Strategy::ServingRate,
            "gen_error_adj" => Strategy::GenErrorAdj,
            other => return Err(Error::ConfigParse(format!("unknown strategy `{other}`"))),
        })
    }
}

const ROW_TOL: f64 = 1e-12;

/// `probs[c][e - 1]`: probability that client `c` trains exit `e` in a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingMatrix {
    probs: Vec<Vec<f64>>,
}

impl SamplingMatrix {
    pub fn new(probs: Vec<Vec<f64>>, topology: &Topology) -> Result<Self> {
        if probs.len() != topology.len() {
            return Err(Error::InvalidWeights("one sampling row per client required".into()));
        }
        for (c, row) in probs.iter().enumerate() {
            let own = topology.nodes()[c].exit;
            if row.len() != topology.num_exits() {
                return Err(Error::InvalidWeights(format!("row {c} has wrong length")));
            }
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidWeights(format!("row {c} has entries outside [0, 1]")));
            }
            if row[own..].iter().any(|&p| p != 0.0) {
                return Err(Error::InvalidWeights(format!("client {c} may train an exit above its own")));
            }
            if row[own - 1] <= 0.0 {
                return Err(Error::InvalidWeights(format!("client {c} never trains its own exit")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidWeights(format!("row {c} sums to {sum}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn num_clients(&self) -> usize {
        self.probs.len()
    }

    pub fn num_exits(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    pub fn get(&self, client: usize, exit: usize) -> f64 {
        self.probs[client][exit - 1]
    }

    pub fn row(&self, client: usize) -> &[f64] {
        &self.probs[client]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.probs
    }
}

/// Every client trains each lower exit with probability `k` and its own
/// exit otherwise.
pub fn build_sampling_matrix(topology: &Topology, k: f64) -> Result<SamplingMatrix> {
    let e_max = topology.num_exits();
    let probs = topology
        .nodes()
        .iter()
        .map(|n| {
            let lower = (n.exit - 1) as f64;
            if !(k >= 0.0) || k * lower >= 1.0 {
                return Err(Error::InvalidK { k, exit: n.exit });
            }
            let mut row = vec![0.0; e_max];
            row[..n.exit - 1].fill(k);
            row[n.exit - 1] = 1.0 - k * lower;
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    SamplingMatrix::new(probs, topology)
}

/// For each exit, the clients that may train it and their pooled data size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitPools {
    pub clients: Vec<Vec<usize>>,
    pub sizes: Vec<usize>,
    pub client_sizes: Vec<usize>,
}

impl ExitPools {
    /// `|S_c| / |S_{e,p}|`, zero when the pool is empty.
    pub fn share(&self, client: usize, exit: usize) -> f64 {
        let pool = self.sizes[exit - 1];
        if pool == 0 {
            0.0
        } else {
            self.client_sizes[client] as f64 / pool as f64
        }
    }
}

pub fn exit_pools(topology: &Topology, p: &SamplingMatrix) -> Result<ExitPools> {
    let client_sizes = topology.dataset_sizes();
    let mut clients = vec![Vec::new(); topology.num_exits()];
    for c in 0..topology.len() {
        for (e, &prob) in p.row(c).iter().enumerate() {
            if prob > 0.0 {
                clients[e].push(c);
            }
        }
    }
    if let Some(e) = clients.iter().position(Vec::is_empty) {
        return Err(Error::EmptyPool(e + 1));
    }
    let sizes = clients
        .iter()
        .map(|cs| cs.iter().map(|&c| client_sizes[c]).sum())
        .collect();
    Ok(ExitPools {
        clients,
        sizes,
        client_sizes,
    })
}
