//! Federated training with exit sampling and importance-weighted
//! aggregation.
//!
//! Each round every client draws one exit from its row of the sampling
//! matrix, runs `J` steps of mini-batch SGD on that exit's loss starting
//! from the global model, and returns its local model. The server moves the
//! global model by
//!
//! ```text
//! eta_s * sum_{(c,e) sampled} weight_e * |S_c|/|S_e| / p_{c,e} * (w_local - w)
//! ```
//!
//! and projects the result onto a ball of radius `R`. The `1/p` factor makes
//! the step an unbiased estimate of the full-participation step.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Task;
use crate::rng::{self, tag, StreamRng};
use crate::strategies::{exit_pools, ExitPools, ExitWeights, SamplingMatrix};
use crate::topology::Topology;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `2 / (mu (gamma + (t-1) J + j + 1))` with `gamma` defaulting to
    /// `max(8 L/mu, J) - 1`.
    Theory {
        mu: f64,
        smoothness: f64,
        #[serde(default)]
        gamma: Option<f64>,
    },
    Constant { lr: f64 },
    /// Cosine annealing from `lr` to zero over all `T * J` local steps.
    Cosine { lr: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub server_lr: f64,
    pub lr_schedule: LrSchedule,
    pub projection_radius: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Record the weighted empirical objective after every round.
    pub track_objective: bool,
    /// Keep a copy of every global iterate.
    pub keep_snapshots: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            local_steps: 4,
            batch_size: 32,
            server_lr: 1.0,
            lr_schedule: LrSchedule::Constant { lr: 0.1 },
            projection_radius: 1e6,
            momentum: 0.0,
            seed: 0,
            track_objective: false,
            keep_snapshots: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.local_steps == 0 {
            return bad("local_steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.server_lr > 0.0) {
            return bad("server_lr must be positive");
        }
        if !(self.projection_radius > 0.0) {
            return bad("projection_radius must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        match self.lr_schedule {
            LrSchedule::Theory { mu, smoothness, .. } => {
                if !(mu > 0.0) || !(smoothness >= mu) {
                    return bad("theory schedule needs mu > 0 and L >= mu");
                }
            }
            LrSchedule::Constant { lr } | LrSchedule::Cosine { lr } => {
                if !(lr > 0.0) {
                    return bad("learning rate must be positive");
                }
            }
        }
        Ok(())
    }

    /// `gamma = max(8 kappa, J) - 1` unless overridden.
    pub fn gamma(&self) -> Option<f64> {
        match self.lr_schedule {
            LrSchedule::Theory { mu, smoothness, gamma } => {
                Some(gamma.unwrap_or_else(|| theory_gamma(smoothness / mu, self.local_steps)))
            }
            _ => None,
        }
    }
}

pub fn theory_gamma(kappa: f64, local_steps: usize) -> f64 {
    (8.0 * kappa).max(local_steps as f64) - 1.0
}

/// Local learning rate at round `t` (1-based) and local step `j` (0-based).
pub fn lr(t: usize, j: usize, cfg: &TrainConfig) -> f64 {
    let step = ((t - 1) * cfg.local_steps + j) as f64;
    match cfg.lr_schedule {
        LrSchedule::Theory { mu, .. } => {
            let gamma = cfg.gamma().expect("theory schedule");
            2.0 / (mu * (gamma + step + 1.0))
        }
        LrSchedule::Constant { lr } => lr,
        LrSchedule::Cosine { lr } => {
            let total = (cfg.rounds * cfg.local_steps) as f64;
            0.5 * lr * (1.0 + (std::f64::consts::PI * step / total).cos())
        }
    }
}

/// One exit per client, in ascending client order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSample {
    pub pairs: Vec<(usize, usize)>,
}

fn draw_exit(row: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (e, &p) in row.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = e;
        if u < acc {
            return e + 1;
        }
    }
    last + 1
}

/// Independent categorical draw per client from stream `(seed, round, client)`.
pub fn sample_round(p: &SamplingMatrix, seed: u64, round: u64) -> RoundSample {
    let pairs = (0..p.num_clients())
        .map(|c| {
            let mut rng = rng::stream(seed, &[tag::SAMPLE, round, c as u64]);
            (c, draw_exit(p.row(c), &mut rng))
        })
        .collect();
    RoundSample { pairs }
}

/// `J` steps of mini-batch SGD on exit `exit` of client `client`, starting
/// from `w_t`. Batches are drawn uniformly with replacement. Coordinates
/// outside the exit's active set are never written.
pub fn local_update(
    task: &dyn Task,
    w_t: &[f64],
    client: usize,
    exit: usize,
    round: usize,
    cfg: &TrainConfig,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let n = task.client_size(client);
    if n == 0 {
        return Err(Error::EmptyClientDataset(client));
    }
    let ranges: Vec<_> = task.segments().active_ranges(exit).collect();
    let mut w = w_t.to_vec();
    let mut grad = vec![0.0; w.len()];
    let mut velocity = vec![0.0; if cfg.momentum > 0.0 { w.len() } else { 0 }];
    let mut batch = vec![0usize; cfg.batch_size];
    for j in 0..cfg.local_steps {
        for b in batch.iter_mut() {
            *b = rng.random_range(0..n);
        }
        task.batch_gradient(&w, client, exit, &batch, rng, &mut grad);
        let eta = lr(round, j, cfg);
        for r in &ranges {
            for i in r.clone() {
                if cfg.momentum > 0.0 {
                    velocity[i] = cfg.momentum * velocity[i] + grad[i];
                    w[i] -= eta * velocity[i];
                } else {
                    w[i] -= eta * grad[i];
                }
            }
        }
    }
    Ok(w)
}

/// A client's local model after training `exit`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    pub client: usize,
    pub exit: usize,
    pub model: Vec<f64>,
}

/// Aggregation coefficient `eta_s * weight_e * |S_c|/|S_e|` (before the
/// `1/p` correction).
pub fn alpha(weights: &ExitWeights, pools: &ExitPools, server_lr: f64, client: usize, exit: usize) -> f64 {
    server_lr * weights.get(exit) * pools.share(client, exit)
}

/// The aggregated point before projection.
pub fn aggregate_unprojected(
    w_t: &[f64],
    updates: &[LocalUpdate],
    weights: &ExitWeights,
    p: &SamplingMatrix,
    pools: &ExitPools,
    server_lr: f64,
) -> Result<Vec<f64>> {
    let mut order: Vec<&LocalUpdate> = updates.iter().collect();
    order.sort_by_key(|u| (u.client, u.exit));
    let mut next = w_t.to_vec();
    for u in order {
        let prob = p.get(u.client, u.exit);
        if prob <= 0.0 {
            return Err(Error::ZeroProbability {
                client: u.client,
                exit: u.exit,
            });
        }
        let coef = alpha(weights, pools, server_lr, u.client, u.exit) / prob;
        if coef == 0.0 {
            continue;
        }
        for ((n, &wl), &w0) in next.iter_mut().zip(&u.model).zip(w_t) {
            *n += coef * (wl - w0);
        }
    }
    Ok(next)
}

/// Euclidean projection onto the origin-centered ball of radius `radius`.
pub fn project(w: &mut [f64], radius: f64) {
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > radius {
        let s = radius / norm;
        for x in w.iter_mut() {
            *x *= s;
        }
    }
}

pub fn aggregate(
    w_t: &[f64],
    updates: &[LocalUpdate],
    weights: &ExitWeights,
    p: &SamplingMatrix,
    pools: &ExitPools,
    server_lr: f64,
    radius: f64,
) -> Result<Vec<f64>> {
    let mut next = aggregate_unprojected(w_t, updates, weights, p, pools, server_lr)?;
    project(&mut next, radius);
    Ok(next)
}

/// Per-round record of a training run. Index 0 is the initial model.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Trajectory {
    pub objective: Vec<f64>,
    pub snapshots: Vec<Vec<f64>>,
    pub samples: Vec<RoundSample>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Vec<f64>,
    pub trajectory: Trajectory,
}

/// Runs all rounds and returns the model after the last aggregation.
pub fn run(
    topology: &Topology,
    task: &dyn Task,
    weights: &ExitWeights,
    p: &SamplingMatrix,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if task.num_clients() != topology.len() || task.num_exits() != topology.num_exits() {
        return Err(Error::InvalidConfig("task does not match the topology".into()));
    }
    if weights.len() != topology.num_exits() {
        return Err(Error::InvalidConfig("one weight per exit required".into()));
    }
    for c in 0..topology.len() {
        if task.client_size(c) != topology.nodes()[c].dataset_size {
            return Err(Error::InvalidConfig(format!(
                "client {c} holds {} samples but the topology says {}",
                task.client_size(c),
                topology.nodes()[c].dataset_size
            )));
        }
    }
    let pools = exit_pools(topology, p)?;
    run_from(task, weights, p, &pools, cfg, None)
}

/// Training loop with precomputed pools and an optional starting point.
pub fn run_from(
    task: &dyn Task,
    weights: &ExitWeights,
    p: &SamplingMatrix,
    pools: &ExitPools,
    cfg: &TrainConfig,
    start: Option<Vec<f64>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut w = match start {
        Some(w) => w,
        None => {
            let mut w = task.init_params(&mut rng::stream(cfg.seed, &[tag::INIT]));
            project(&mut w, cfg.projection_radius);
            w
        }
    };
    let mut trajectory = Trajectory::default();
    let record = |w: &[f64], traj: &mut Trajectory| -> Result<()> {
        if cfg.track_objective {
            traj.objective.push(crate::models::weighted_objective(task, w, weights, pools)?);
        }
        if cfg.keep_snapshots {
            traj.snapshots.push(w.to_vec());
        }
        Ok(())
    };
    record(&w, &mut trajectory)?;

    for t in 1..=cfg.rounds {
        let sample = sample_round(p, cfg.seed, t as u64);
        let updates = sample
            .pairs
            .par_iter()
            .map(|&(c, e)| {
                let mut rng = rng::stream(cfg.seed, &[tag::LOCAL, t as u64, c as u64]);
                local_update(task, &w, c, e, t, cfg, &mut rng).map(|model| LocalUpdate {
                    client: c,
                    exit: e,
                    model,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        w = aggregate(&w, &updates, weights, p, pools, cfg.server_lr, cfg.projection_radius)?;
        record(&w, &mut trajectory)?;
        if cfg.keep_snapshots {
            trajectory.samples.push(sample);
        }
    }
    Ok(TrainOutcome {
        model: w,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::quadratic::{QuadraticPair, QuadraticTask};
    use crate::strategies::{build_sampling_matrix, equal_weight};
    use crate::topology::NodeSpec;
    use nalgebra::{DMatrix, DVector};

    fn theory_cfg(mu: f64, l: f64, j: usize) -> TrainConfig {
        TrainConfig {
            local_steps: j,
            lr_schedule: LrSchedule::Theory { mu, smoothness: l, gamma: None },
            ..Default::default()
        }
    }

    fn one_d_task(center: f64) -> (Topology, QuadraticTask) {
        let t = Topology::new(vec![NodeSpec { dataset_size: 3, ..NodeSpec::new(1, None, 1) }], 1).unwrap();
        let pair = QuadraticPair {
            curvature: DMatrix::identity(1, 1),
            center: DVector::from_element(1, center),
            sigma: 0.0,
        };
        let task = QuadraticTask::new(&t, vec![vec![Some(pair)]], false).unwrap();
        (t, task)
    }

    #[test]
    fn theory_learning_rates() {
        let cfg = theory_cfg(1.0, 1.0, 4);
        assert_eq!(cfg.gamma(), Some(7.0));
        assert!((lr(1, 0, &cfg) - 0.25).abs() < 1e-15);
        assert!((lr(1, 3, &cfg) - 2.0 / 11.0).abs() < 1e-15);
        assert!((lr(2, 0, &cfg) - 2.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn constant_and_cosine_rates() {
        let cfg = TrainConfig { lr_schedule: LrSchedule::Constant { lr: 0.1 }, ..Default::default() };
        assert_eq!(lr(1, 0, &cfg), 0.1);
        assert_eq!(lr(57, 3, &cfg), 0.1);
        let cfg = TrainConfig { rounds: 10, local_steps: 2, lr_schedule: LrSchedule::Cosine { lr: 0.2 }, ..Default::default() };
        assert_eq!(lr(1, 0, &cfg), 0.2);
        assert!((lr(6, 0, &cfg) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { rounds: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { projection_radius: 0.0, ..Default::default() }.validate().is_err());
        assert!(theory_cfg(1.0, 0.5, 2).validate().is_err());
        assert!(theory_cfg(1.0, 2.0, 2).validate().is_ok());
    }

    #[test]
    fn deterministic_own_exit_row() {
        let t = Topology::cloud_edge_device();
        let p = build_sampling_matrix(&t, 0.0).unwrap();
        for round in 0..20 {
            let s = sample_round(&p, 5, round);
            for (c, e) in s.pairs {
                assert_eq!(e, t.nodes()[c].exit);
            }
        }
        let p = build_sampling_matrix(&t, 0.2).unwrap();
        assert_eq!(sample_round(&p, 5, 3), sample_round(&p, 5, 3));
    }

    #[test]
    fn local_update_at_center_is_fixed_point() {
        let (_, task) = one_d_task(0.4);
        let cfg = theory_cfg(1.0, 1.0, 5);
        let w = local_update(&task, &[0.4], 0, 1, 1, &cfg, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(w, vec![0.4]);
    }

    #[test]
    fn one_explicit_step() {
        let (_, task) = one_d_task(0.0);
        let cfg = TrainConfig { local_steps: 1, lr_schedule: LrSchedule::Constant { lr: 0.25 }, ..Default::default() };
        let w = local_update(&task, &[1.0], 0, 1, 1, &cfg, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(w, vec![0.75]);
    }

    #[test]
    fn empty_client_is_an_error() {
        let t = Topology::new(vec![NodeSpec::new(1, None, 1)], 1).unwrap();
        let pair = QuadraticPair { curvature: DMatrix::identity(1, 1), center: DVector::zeros(1), sigma: 0.0 };
        let task = QuadraticTask::new(&t, vec![vec![Some(pair)]], false).unwrap();
        let r = local_update(&task, &[1.0], 0, 1, 1, &TrainConfig::default(), &mut rng::stream(0, &[]));
        assert!(matches!(r, Err(Error::EmptyClientDataset(0))));
    }

    #[test]
    fn aggregation_edge_cases() {
        let (t, _) = one_d_task(0.0);
        let p = build_sampling_matrix(&t, 0.0).unwrap();
        let pools = exit_pools(&t, &p).unwrap();
        let w = equal_weight(1);

        // Zero pseudo-gradients.
        let u = vec![LocalUpdate { client: 0, exit: 1, model: vec![0.3] }];
        assert_eq!(aggregate(&[0.3], &u, &w, &p, &pools, 1.0, 1.0).unwrap(), vec![0.3]);

        // Weights collapse to one: the result is the projected local model.
        let u = vec![LocalUpdate { client: 0, exit: 1, model: vec![-0.6] }];
        let next = aggregate(&[0.3], &u, &w, &p, &pools, 1.0, 1.0).unwrap();
        assert!((next[0] + 0.6).abs() < 1e-15);
        let u = vec![LocalUpdate { client: 0, exit: 1, model: vec![4.0] }];
        assert_eq!(aggregate(&[0.3], &u, &w, &p, &pools, 1.0, 2.0).unwrap(), vec![2.0]);
    }

    #[test]
    fn projection_preserves_direction() {
        let mut v = vec![6.0, 8.0];
        project(&mut v, 5.0);
        assert!((v[0] - 3.0).abs() < 1e-15 && (v[1] - 4.0).abs() < 1e-15);
        let mut v = vec![0.1, 0.2];
        project(&mut v, 5.0);
        assert_eq!(v, vec![0.1, 0.2]);
    }

    #[test]
    fn zero_probability_update_rejected() {
        let t = Topology::cloud_edge_device().with_dataset_sizes(&[10; 7]).unwrap();
        let p = build_sampling_matrix(&t, 0.0).unwrap();
        let pools = exit_pools(&t, &p).unwrap();
        let u = vec![LocalUpdate { client: 0, exit: 1, model: vec![0.0] }];
        let r = aggregate(&[0.0], &u, &equal_weight(3), &p, &pools, 1.0, 1.0);
        assert!(matches!(r, Err(Error::ZeroProbability { client: 0, exit: 1 })));
    }
}
