//! Strongly convex quadratic objectives with additive Gaussian gradient
//! noise. Every (client, exit) pair has its own curvature `A`, center `a`
//! and noise scale `sigma`:
//!
//! ```text
//! F_{c,e}(w) = 1/2 (w - a)^T A (w - a)
//! ```
//!
//! A stochastic gradient is `A (w - a) + sigma * z` with `z ~ N(0, I/d)`, so
//! the gradient noise has second moment exactly `sigma^2`. The per-sample
//! loss `F(w) + sigma * z_s^T (w - a)` has expectation `F(w)` over samples.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{SegmentMap, Task};
use crate::error::{Error, Result};
use crate::rng::{self, tag, StreamRng};
use crate::strategies::{ExitPools, ExitWeights};
use crate::topology::Topology;

#[derive(Clone, Debug)]
pub struct QuadraticPair {
    pub curvature: DMatrix<f64>,
    pub center: DVector<f64>,
    pub sigma: f64,
}

impl QuadraticPair {
    /// `max_{|w| <= radius} 1/2 (w - a)^T A (w - a)`.
    ///
    /// The maximizer lies on the sphere. In the eigenbasis of `A` with
    /// `b = Q^T a`, stationarity gives `x_i = lambda_i b_i / (lambda_i - nu)`
    /// for a multiplier `nu >= lambda_max`, found by bisection on `|x| = radius`.
    pub fn max_loss_on_ball(&self, radius: f64) -> f64 {
        let eig = self.curvature.clone().symmetric_eigen();
        let lambda: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let b: Vec<f64> = (eig.eigenvectors.transpose() * &self.center).iter().copied().collect();
        let lmax = lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let value = |x: &[f64]| -> f64 {
            0.5 * lambda.iter().zip(x).zip(&b).map(|((l, xi), bi)| l * (xi - bi).powi(2)).sum::<f64>()
        };
        let point = |nu: f64| -> Vec<f64> {
            lambda
                .iter()
                .zip(&b)
                .map(|(&l, &bi)| if l == nu { 0.0 } else { l * bi / (l - nu) })
                .collect()
        };
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let top_scale = 1e-12 * lmax.max(1.0);
        let top_weight: f64 = lambda
            .iter()
            .zip(&b)
            .filter(|(&l, _)| lmax - l <= top_scale)
            .map(|(_, bi)| bi * bi)
            .sum();
        if top_weight == 0.0 {
            // Degenerate case: the secular equation may have no root above
            // lambda_max. Then nu = lambda_max and the slack goes along the
            // top eigenspace.
            let mut x = point(lmax);
            for (xi, &l) in x.iter_mut().zip(&lambda) {
                if lmax - l <= top_scale {
                    *xi = 0.0;
                }
            }
            let n = norm(&x);
            if n <= radius {
                let i = lambda.iter().position(|&l| lmax - l <= top_scale).unwrap();
                x[i] = (radius * radius - n * n).sqrt();
                return value(&x);
            }
        }
        let mut lo = lmax;
        let mut hi = lmax + 1.0;
        while norm(&point(hi)) > radius {
            hi = lmax + 2.0 * (hi - lmax);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            if norm(&point(mid)) > radius {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        value(&point(hi))
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(w) - &self.center;
        0.5 * diff.dot(&(&self.curvature * &diff))
    }

    fn exact_gradient(&self, w: &[f64]) -> DVector<f64> {
        &self.curvature * (DVector::from_column_slice(w) - &self.center)
    }
}

/// Parameters for drawing a random quadratic instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadraticSpec {
    pub dim: usize,
    pub eig_min: f64,
    pub eig_max: f64,
    /// Centers are drawn uniformly in the ball of this radius.
    pub center_radius: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub stochastic: bool,
}

impl Default for QuadraticSpec {
    fn default() -> Self {
        Self {
            dim: 4,
            eig_min: 1.0,
            eig_max: 2.0,
            center_radius: 1.0,
            sigma_min: 0.0,
            sigma_max: 0.5,
            stochastic: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QuadraticTask {
    dim: usize,
    num_exits: usize,
    segments: SegmentMap,
    client_sizes: Vec<usize>,
    /// `pairs[c][e - 1]`, present for `e <= E_c`.
    pairs: Vec<Vec<Option<QuadraticPair>>>,
    pub stochastic: bool,
    noise_seed: u64,
}

/// Closed-form minimizers of the weighted objective and of every pair.
#[derive(Clone, Debug)]
pub struct QuadraticOptimum {
    pub w_star: Vec<f64>,
    pub objective_star: f64,
    pub pair_minimizers: Vec<Vec<Option<Vec<f64>>>>,
    /// Always zero for quadratics; kept to mirror the general definition.
    pub pair_minimum: Vec<Vec<Option<f64>>>,
}

impl QuadraticTask {
    pub fn new(topology: &Topology, pairs: Vec<Vec<Option<QuadraticPair>>>, stochastic: bool) -> Result<Self> {
        let num_exits = topology.num_exits();
        if pairs.len() != topology.len() {
            return Err(Error::InvalidConfig("one row of pairs per client required".into()));
        }
        let dim = pairs
            .iter()
            .flatten()
            .flatten()
            .map(|p| p.center.len())
            .next()
            .ok_or_else(|| Error::InvalidConfig("no quadratic pairs".into()))?;
        for (c, row) in pairs.iter().enumerate() {
            let own = topology.nodes()[c].exit;
            if row.len() != num_exits {
                return Err(Error::InvalidConfig(format!("client {c}: wrong number of exits")));
            }
            for (e, pair) in row.iter().enumerate() {
                match pair {
                    Some(p) if e < own => {
                        if p.center.len() != dim || p.curvature.shape() != (dim, dim) {
                            return Err(Error::InvalidConfig(format!("pair ({c}, {}) has wrong shape", e + 1)));
                        }
                        if !(p.sigma >= 0.0) {
                            return Err(Error::InvalidConfig("sigma must be nonnegative".into()));
                        }
                        let eig = p.curvature.clone().symmetric_eigen();
                        if eig.eigenvalues.min() <= 0.0 {
                            return Err(Error::InvalidConfig(format!("pair ({c}, {}) is not positive definite", e + 1)));
                        }
                    }
                    None if e >= own => {}
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "client {c} must define exactly exits 1..={own}"
                        )))
                    }
                }
            }
        }
        Ok(Self {
            dim,
            num_exits,
            segments: SegmentMap::shared(dim, num_exits),
            client_sizes: topology.dataset_sizes(),
            pairs,
            stochastic,
            noise_seed: 0,
        })
    }

    /// Random instance: curvatures `Q diag(l) Q^T` with eigenvalues in
    /// `[eig_min, eig_max]` (both endpoints attained), centers uniform in a
    /// ball and noise scales uniform in `[sigma_min, sigma_max]`.
    pub fn random(topology: &Topology, spec: &QuadraticSpec, seed: u64) -> Result<Self> {
        if spec.dim == 0 || !(spec.eig_min > 0.0) || spec.eig_max < spec.eig_min {
            return Err(Error::InvalidConfig("need dim > 0 and 0 < eig_min <= eig_max".into()));
        }
        if !(spec.sigma_min >= 0.0) || spec.sigma_max < spec.sigma_min {
            return Err(Error::InvalidConfig("need 0 <= sigma_min <= sigma_max".into()));
        }
        let d = spec.dim;
        let pairs = topology
            .nodes()
            .iter()
            .enumerate()
            .map(|(c, node)| {
                (1..=topology.num_exits())
                    .map(|e| {
                        if e > node.exit {
                            return None;
                        }
                        let mut rng = rng::stream(seed, &[tag::QUADRATIC, c as u64, e as u64]);
                        let gauss = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
                        let q = gauss.qr().q();
                        let eigs = DVector::from_fn(d, |i, _| match i {
                            0 => spec.eig_min,
                            1 => spec.eig_max,
                            _ => rng.random_range(spec.eig_min..=spec.eig_max),
                        });
                        let curvature = &q * DMatrix::from_diagonal(&eigs) * q.transpose();
                        let curvature = (&curvature + curvature.transpose()) * 0.5;
                        let center = uniform_in_ball(&mut rng, d, spec.center_radius);
                        let sigma = if spec.sigma_max > spec.sigma_min {
                            rng.random_range(spec.sigma_min..spec.sigma_max)
                        } else {
                            spec.sigma_min
                        };
                        Some(QuadraticPair {
                            curvature,
                            center: DVector::from_vec(center),
                            sigma,
                        })
                    })
                    .collect()
            })
            .collect();
        let mut task = Self::new(topology, pairs, spec.stochastic)?;
        task.noise_seed = seed;
        Ok(task)
    }

    pub fn pair(&self, client: usize, exit: usize) -> Option<&QuadraticPair> {
        self.pairs.get(client)?.get(exit - 1)?.as_ref()
    }

    fn pair_ref(&self, client: usize, exit: usize) -> &QuadraticPair {
        self.pair(client, exit)
            .unwrap_or_else(|| panic!("client {client} has no quadratic for exit {exit}"))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, &QuadraticPair)> {
        self.pairs.iter().enumerate().flat_map(|(c, row)| {
            row.iter()
                .enumerate()
                .filter_map(move |(e, p)| p.as_ref().map(|p| (c, e + 1, p)))
        })
    }

    /// Strong convexity constant: smallest eigenvalue over all pairs.
    pub fn mu(&self) -> f64 {
        self.pairs()
            .map(|(_, _, p)| p.curvature.clone().symmetric_eigen().eigenvalues.min())
            .fold(f64::INFINITY, f64::min)
    }

    /// Smoothness constant: largest eigenvalue over all pairs.
    pub fn smoothness(&self) -> f64 {
        self.pairs()
            .map(|(_, _, p)| p.curvature.clone().symmetric_eigen().eigenvalues.max())
            .fold(0.0, f64::max)
    }

    pub fn sigma(&self, client: usize, exit: usize) -> f64 {
        self.pair_ref(client, exit).sigma
    }

    /// Loss of one sample; the sample index picks the noise realization.
    pub fn sample_loss(&self, w: &[f64], client: usize, exit: usize, sample: u64) -> f64 {
        let pair = self.pair_ref(client, exit);
        let mut rng = rng::stream(self.noise_seed, &[tag::NOISE, client as u64, exit as u64, sample]);
        let scale = pair.sigma / (self.dim as f64).sqrt();
        let linear: f64 = w
            .iter()
            .zip(pair.center.iter())
            .map(|(wi, ai)| scale * rng.sample::<f64, _>(StandardNormal) * (wi - ai))
            .sum();
        pair.loss(w) + linear
    }

    /// Largest pair loss over the ball of radius `radius`.
    pub fn loss_cap(&self, radius: f64) -> f64 {
        self.pairs()
            .map(|(_, _, p)| p.max_loss_on_ball(radius))
            .fold(0.0, f64::max)
    }

    /// Largest center norm, useful for choosing a projection radius.
    pub fn max_center_norm(&self) -> f64 {
        self.pairs().map(|(_, _, p)| p.center.norm()).fold(0.0, f64::max)
    }

    /// Solves `(sum_k beta_k A_k) w = sum_k beta_k A_k a_k` with
    /// `beta_{c,e} = weight_e |S_c| / |S_e|`.
    pub fn minimizers(&self, weights: &ExitWeights, pools: &ExitPools) -> Result<QuadraticOptimum> {
        let d = self.dim;
        let mut lhs = DMatrix::<f64>::zeros(d, d);
        let mut rhs = DVector::<f64>::zeros(d);
        let mut total = 0.0;
        for (e, &lw) in weights.weights.iter().enumerate() {
            for &c in &pools.clients[e] {
                let beta = lw * pools.share(c, e + 1);
                if beta == 0.0 {
                    continue;
                }
                let pair = self.pair_ref(c, e + 1);
                lhs += &pair.curvature * beta;
                rhs += &pair.curvature * &pair.center * beta;
                total += beta;
            }
        }
        if total <= 0.0 {
            return Err(Error::SingularSystem);
        }
        let chol = lhs.clone().cholesky().ok_or(Error::SingularSystem)?;
        let w = chol.solve(&rhs);
        let residual = (&lhs * &w - &rhs).norm();
        if residual > 1e-10 * rhs.norm().max(1.0) {
            return Err(Error::SingularSystem);
        }
        let w_star: Vec<f64> = w.iter().copied().collect();
        let objective_star = super::weighted_objective(self, &w_star, weights, pools)?;
        let pair_minimizers = self
            .pairs
            .iter()
            .map(|row| row.iter().map(|p| p.as_ref().map(|p| p.center.iter().copied().collect())).collect())
            .collect();
        let pair_minimum = self
            .pairs
            .iter()
            .map(|row| row.iter().map(|p| p.as_ref().map(|_| 0.0)).collect())
            .collect();
        Ok(QuadraticOptimum {
            w_star,
            objective_star,
            pair_minimizers,
            pair_minimum,
        })
    }

    /// Noiseless gradient of one pair.
    pub fn exact_gradient(&self, w: &[f64], client: usize, exit: usize) -> Vec<f64> {
        self.pair_ref(client, exit).exact_gradient(w).iter().copied().collect()
    }
}

pub(crate) fn uniform_in_ball(rng: &mut StreamRng, d: usize, radius: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    dir.into_iter().map(|x| x / norm * r).collect()
}

impl Task for QuadraticTask {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_exits(&self) -> usize {
        self.num_exits
    }

    fn segments(&self) -> &SegmentMap {
        &self.segments
    }

    fn num_clients(&self) -> usize {
        self.pairs.len()
    }

    fn client_size(&self, client: usize) -> usize {
        self.client_sizes[client]
    }

    fn batch_gradient(
        &self,
        w: &[f64],
        client: usize,
        exit: usize,
        _batch: &[usize],
        rng: &mut StreamRng,
        out: &mut [f64],
    ) {
        let pair = self.pair_ref(client, exit);
        let g = pair.exact_gradient(w);
        let scale = pair.sigma / (self.dim as f64).sqrt();
        for (o, gi) in out.iter_mut().zip(g.iter()) {
            *o = *gi;
            if self.stochastic && scale > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                *o += scale * z;
            }
        }
    }

    fn client_loss(&self, w: &[f64], client: usize, exit: usize) -> f64 {
        self.pair_ref(client, exit).loss(w)
    }

    fn init_params(&self, rng: &mut StreamRng) -> Vec<f64> {
        uniform_in_ball(rng, self.dim, 1.0)
    }
}
