//! Error decomposition for inference-aware training: the bias from training
//! on the wrong exit weights, the optimization error of the federated
//! procedure, and a FLOPS-based proxy for the generalization term.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedtrain::theory_gamma;
use crate::models::quadratic::{uniform_in_ball, QuadraticTask};
use crate::models::Task;
use crate::rng::{self, tag};
use crate::strategies::{ExitPools, ExitWeights, SamplingMatrix};

const NORMALIZATION_TOL: f64 = 1e-9;

fn check_normalized(w: &ExitWeights) -> Result<()> {
    let s = w.sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL || w.weights.iter().any(|&x| x < 0.0) {
        return Err(Error::NotNormalized(s));
    }
    Ok(())
}

/// `1/2 * sum_e |a_e - b_e|`.
pub fn tv_distance(a: &ExitWeights, b: &ExitWeights) -> Result<f64> {
    check_normalized(a)?;
    check_normalized(b)?;
    if a.len() != b.len() {
        return Err(Error::InvalidWeights("weight vectors differ in length".into()));
    }
    Ok(0.5 * a.weights.iter().zip(&b.weights).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// One `(client, exit)` pair's value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairValue {
    pub client: usize,
    pub exit: usize,
    pub value: f64,
}

/// Constants entering the optimization-error bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub mu: f64,
    pub smoothness: f64,
    /// `M`, an upper bound on every loss over the feasible ball.
    pub loss_cap: f64,
    /// `R`; the feasible set is the origin-centered ball of this radius.
    pub radius: f64,
    /// Gradient noise level per pair.
    pub sigma: Vec<PairValue>,
    /// `Gamma`, the heterogeneity at the weighted optimum.
    pub heterogeneity: f64,
}

impl TheoryParams {
    pub fn kappa(&self) -> f64 {
        self.smoothness / self.mu
    }

    /// Exact constants for a quadratic task trained with `weights`.
    pub fn from_quadratic(task: &QuadraticTask, weights: &ExitWeights, pools: &ExitPools, radius: f64) -> Result<Self> {
        Ok(Self {
            mu: task.mu(),
            smoothness: task.smoothness(),
            loss_cap: task.loss_cap(radius),
            radius,
            sigma: task
                .pairs()
                .map(|(c, e, p)| PairValue {
                    client: c,
                    exit: e,
                    value: p.sigma,
                })
                .collect(),
            heterogeneity: gamma(task, weights, pools)?,
        })
    }
}

/// `Gamma = max_{(c,e)} F_{c,e}(w*) - F*_{c,e}` over the pairs in the
/// pools, where `w*` minimizes the weighted objective. Every quadratic pair
/// has minimum zero.
pub fn gamma(task: &QuadraticTask, weights: &ExitWeights, pools: &ExitPools) -> Result<f64> {
    let opt = task.minimizers(weights, pools)?;
    Ok(task
        .pairs()
        .filter(|&(c, e, _)| pools.clients[e - 1].contains(&c))
        .map(|(_, _, p)| p.loss(&opt.w_star))
        .fold(0.0, f64::max))
}

/// Second-moment bounds `G_{c,e} = sigma^2 + (2 L R)^2` and their maximum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondMoment {
    pub per_pair: Vec<PairValue>,
    pub max: f64,
}

impl SecondMoment {
    pub fn get(&self, client: usize, exit: usize) -> Option<f64> {
        self.per_pair
            .iter()
            .find(|v| v.client == client && v.exit == exit)
            .map(|v| v.value)
    }
}

pub fn grad_second_moment(params: &TheoryParams) -> SecondMoment {
    let drift = (params.smoothness * 2.0 * params.radius).powi(2);
    let per_pair: Vec<PairValue> = params
        .sigma
        .iter()
        .map(|s| PairValue {
            value: s.value * s.value + drift,
            ..s.clone()
        })
        .collect();
    let max = per_pair.iter().map(|v| v.value).fold(0.0, f64::max);
    SecondMoment { per_pair, max }
}

/// `alpha_{c,e} = eta_s * weight_e * |S_c| / |S_e|` for every pair in the
/// pools, in client-then-exit order.
pub fn alphas(weights: &ExitWeights, pools: &ExitPools, server_lr: f64) -> Vec<PairValue> {
    let mut out = Vec::new();
    for c in 0..pools.client_sizes.len() {
        for e in 1..=pools.sizes.len() {
            if pools.clients[e - 1].contains(&c) {
                out.push(PairValue {
                    client: c,
                    exit: e,
                    value: server_lr * weights.get(e) * pools.share(c, e),
                });
            }
        }
    }
    out
}

/// Sampling term `sum_{c,e} alpha^2 (1-p)/p * G_{c,e}`. Pairs absent from
/// `second_moment` fall back to its maximum.
fn sampling_term(alpha: &[PairValue], p: &SamplingMatrix, second_moment: &SecondMoment) -> Result<f64> {
    let mut total = 0.0;
    for a in alpha {
        if a.value == 0.0 {
            continue;
        }
        let prob = p.get(a.client, a.exit);
        if prob <= 0.0 {
            return Err(Error::ZeroProbabilityWithWeight {
                client: a.client,
                exit: a.exit,
            });
        }
        let g = second_moment.get(a.client, a.exit).unwrap_or(second_moment.max);
        total += a.value * a.value * (1.0 - prob) / prob * g;
    }
    Ok(total)
}

/// Components of `B`, kept separate for reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundB {
    pub noise: f64,
    pub heterogeneity: f64,
    pub drift: f64,
    pub sampling: f64,
    pub total: f64,
}

/// `B = sum alpha^2 sigma^2 + 6 L Gamma + 8 (J-1)^2 G^2
///      + 4 J^2 sum alpha^2 (1-p)/p G_{c,e}`.
pub fn bound_b(params: &TheoryParams, alpha: &[PairValue], p: &SamplingMatrix, local_steps: usize) -> Result<BoundB> {
    let g = grad_second_moment(params);
    let heterogeneity = 6.0 * params.smoothness * params.heterogeneity;
    bound_b_from_parts(&params.sigma, heterogeneity, &g, alpha, p, local_steps)
}

/// `B` from explicit noise levels, heterogeneity term `6 L Gamma` and
/// second moments. Pairs without a noise level contribute no noise term.
pub fn bound_b_from_parts(
    sigma: &[PairValue],
    heterogeneity: f64,
    second_moment: &SecondMoment,
    alpha: &[PairValue],
    p: &SamplingMatrix,
    local_steps: usize,
) -> Result<BoundB> {
    let noise: f64 = alpha
        .iter()
        .map(|a| {
            let s = sigma
                .iter()
                .find(|s| s.client == a.client && s.exit == a.exit)
                .map_or(0.0, |s| s.value);
            a.value * a.value * s * s
        })
        .sum();
    let jm1 = local_steps.saturating_sub(1) as f64;
    let drift = 8.0 * jm1 * jm1 * second_moment.max * second_moment.max;
    let j = local_steps as f64;
    let sampling = 4.0 * j * j * sampling_term(alpha, p, second_moment)?;
    Ok(BoundB {
        noise,
        heterogeneity,
        drift,
        sampling,
        total: noise + heterogeneity + drift + sampling,
    })
}

/// Denominator of the optimization bound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundDenominator {
    /// `gamma + J T`, one step per local iteration.
    #[default]
    LocalSteps,
    /// `gamma + T`, the alternative reading counting rounds only.
    Rounds,
}

/// `kappa / (gamma + J T) * (2 B / mu + mu (gamma + 1) / 2 * |w_1 - w*|^2)`.
pub fn opt_error_bound(
    params: &TheoryParams,
    b: f64,
    rounds: usize,
    local_steps: usize,
    initial_dist_sq: f64,
    denominator: BoundDenominator,
) -> f64 {
    let kappa = params.kappa();
    let gamma = theory_gamma(kappa, local_steps);
    let steps = match denominator {
        BoundDenominator::LocalSteps => (local_steps * rounds) as f64,
        BoundDenominator::Rounds => rounds as f64,
    };
    kappa / (gamma + steps) * (2.0 * b / params.mu + params.mu * (gamma + 1.0) / 2.0 * initial_dist_sq)
}

/// `2 M tv(a, b)`.
pub fn bias_bound(loss_cap: f64, trained: &ExitWeights, served: &ExitWeights) -> Result<f64> {
    Ok(2.0 * loss_cap * tv_distance(trained, served)?)
}

fn clipped_objective(task: &QuadraticTask, w: &[f64], weights: &ExitWeights, pools: &ExitPools, cap: f64) -> f64 {
    let mut total = 0.0;
    for (e, &lw) in weights.weights.iter().enumerate() {
        if lw == 0.0 {
            continue;
        }
        for &c in &pools.clients[e] {
            let loss = task.pair(c, e + 1).map_or(0.0, |p| p.loss(w).min(cap));
            total += lw * pools.share(c, e + 1) * loss;
        }
    }
    total
}

/// Largest gap `|F_a(w) - F_b(w)|` between the clipped weighted objectives
/// over `probes` points drawn uniformly from the radius-`radius` ball.
#[allow(clippy::too_many_arguments)]
pub fn empirical_bias(
    task: &QuadraticTask,
    trained: &ExitWeights,
    served: &ExitWeights,
    pools: &ExitPools,
    loss_cap: f64,
    radius: f64,
    probes: usize,
    seed: u64,
) -> f64 {
    (0..probes)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, &[tag::PROBE, i as u64]);
            let w = uniform_in_ball(&mut rng, task.dim(), radius);
            let a = clipped_objective(task, &w, trained, pools, loss_cap);
            let b = clipped_objective(task, &w, served, pools, loss_cap);
            (a - b).abs()
        })
        .reduce(|| 0.0, f64::max)
}

/// `sum_e weight_e * sqrt(flops_e / |S_e|)`, with FLOPS standing in for
/// the pseudo-dimension of exit `e`'s hypothesis class.
pub fn gen_proxy(weights: &ExitWeights, flops: &[f64], pools: &ExitPools) -> Result<f64> {
    let mut total = 0.0;
    for (e, &lw) in weights.weights.iter().enumerate() {
        if lw == 0.0 {
            continue;
        }
        let size = pools.sizes[e];
        if size == 0 {
            return Err(Error::EmptyPool(e + 1));
        }
        total += lw * (flops[e] / size as f64).sqrt();
    }
    Ok(total)
}

/// Mean over `models` of `F(w) - F*` for the weighted quadratic objective.
pub fn empirical_opt_error(
    task: &QuadraticTask,
    models: &[Vec<f64>],
    weights: &ExitWeights,
    pools: &ExitPools,
) -> Result<f64> {
    if models.is_empty() {
        return Err(Error::InvalidConfig("no models to evaluate".into()));
    }
    let opt = task.minimizers(weights, pools)?;
    let mut total = 0.0;
    for w in models {
        total += crate::models::weighted_objective(task, w, weights, pools)? - opt.objective_star;
    }
    Ok(total / models.len() as f64)
}

/// Bound on the variance of the aggregate caused by exit sampling:
/// `4 eta^2 J^2 sum_{c,e} alpha^2 (1-p)/p * G_{c,e}`, where `eta` is the
/// largest local step size of the round.
pub fn sampling_variance_bound(
    alpha: &[PairValue],
    p: &SamplingMatrix,
    second_moment: &SecondMoment,
    eta: f64,
    local_steps: usize,
) -> Result<f64> {
    let j = local_steps as f64;
    Ok(4.0 * eta * eta * j * j * sampling_term(alpha, p, second_moment)?)
}

/// Exact variance of the sampled aggregate for frozen local displacements
/// `deltas[c][e-1] = w^{(c,e)} - w_t`:
/// `sum_c [ sum_e alpha^2/p |delta|^2 - |sum_e alpha delta|^2 ]`.
pub fn exact_sampling_variance(
    alpha: &[PairValue],
    p: &SamplingMatrix,
    deltas: &[Vec<Option<Vec<f64>>>],
) -> Result<f64> {
    let mut total = 0.0;
    for (c, row) in deltas.iter().enumerate() {
        let mut mean: Option<Vec<f64>> = None;
        for a in alpha.iter().filter(|a| a.client == c && a.value != 0.0) {
            let prob = p.get(c, a.exit);
            if prob <= 0.0 {
                return Err(Error::ZeroProbabilityWithWeight { client: c, exit: a.exit });
            }
            let d = row[a.exit - 1]
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig(format!("no displacement for client {c} exit {}", a.exit)))?;
            total += a.value * a.value / prob * d.iter().map(|x| x * x).sum::<f64>();
            let m = mean.get_or_insert_with(|| vec![0.0; d.len()]);
            for (mi, di) in m.iter_mut().zip(d) {
                *mi += a.value * di;
            }
        }
        if let Some(m) = mean {
            total -= m.iter().map(|x| x * x).sum::<f64>();
        }
    }
    Ok(total)
}

/// Monte Carlo estimates of the gradient noise level and second moment for
/// a task without closed-form constants. Each probe draws a pair, a model
/// from `init_params`, and a batch; `sigma` is the largest batch-gradient
/// deviation from the full client gradient and `second_moment` the largest
/// squared batch-gradient norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub sigma: f64,
    pub second_moment: f64,
    pub probes: usize,
}

pub fn estimate_noise(task: &dyn Task, pools: &ExitPools, batch_size: usize, probes: usize, seed: u64) -> NoiseEstimate {
    let pairs: Vec<(usize, usize)> = pools
        .clients
        .iter()
        .enumerate()
        .flat_map(|(e, cs)| cs.iter().map(move |&c| (c, e + 1)))
        .filter(|&(c, _)| task.client_size(c) > 0)
        .collect();
    let results: Vec<(f64, f64)> = (0..probes)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, &[tag::PROBE, i as u64]);
            let (c, e) = pairs[rng.random_range(0..pairs.len())];
            let w = task.init_params(&mut rng);
            let n = task.client_size(c);
            let all: Vec<usize> = (0..n).collect();
            let batch: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
            let mut full = vec![0.0; w.len()];
            let mut g = vec![0.0; w.len()];
            task.batch_gradient(&w, c, e, &all, &mut rng, &mut full);
            task.batch_gradient(&w, c, e, &batch, &mut rng, &mut g);
            let dev = g.iter().zip(&full).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let sq = g.iter().map(|x| x * x).sum::<f64>();
            (dev, sq)
        })
        .collect();
    NoiseEstimate {
        sigma: results.iter().map(|r| r.0).fold(0.0, f64::max),
        second_moment: results.iter().map(|r| r.1).fold(0.0, f64::max),
        probes,
    }
}

/// `(T, value)` entry of a per-horizon series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonValue {
    pub rounds: usize,
    pub value: f64,
}

/// Every term of the error decomposition available for one run. Terms that
/// do not apply to the task are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub tv: f64,
    pub heterogeneity: Option<f64>,
    pub second_moment_per_pair: Vec<PairValue>,
    pub second_moment_max: f64,
    pub b: Option<BoundB>,
    /// `true` when the noise constants come from Monte Carlo estimates and
    /// the heterogeneity term is omitted.
    pub estimated: bool,
    pub opt_bound: Vec<HorizonValue>,
    pub empirical_opt_error: Vec<HorizonValue>,
    pub bias_bound: Option<f64>,
    pub empirical_bias: Option<f64>,
    pub gen_proxy: f64,
}
