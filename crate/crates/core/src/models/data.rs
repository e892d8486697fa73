//! Synthetic teacher-labeled classification data and its partition over
//! the layers of the tree.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mlp::{ClassificationTask, MlpArch};
use crate::error::{Error, Result};
use crate::rng::{self, tag, StreamRng};
use crate::topology::Topology;

/// Row-major features with integer class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Dataset {
        let mut out = Dataset::default();
        for p in parts {
            out.input_dim = p.input_dim;
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
        }
        out
    }
}

/// Share of the training data held by each layer, devices (exit 1) first.
#[derive(Clone, Debug, PartialEq)]
pub enum DataPartition {
    Equal,
    CloudBiasMild,
    CloudBiasStrong,
    DevicesBiasStrong,
    Custom(Vec<f64>),
}

impl DataPartition {
    pub fn fractions(&self) -> Vec<f64> {
        match self {
            DataPartition::Equal => vec![1.0 / 3.0; 3],
            DataPartition::CloudBiasMild => vec![0.143, 0.286, 0.571],
            DataPartition::CloudBiasStrong => vec![0.034, 0.199, 0.767],
            DataPartition::DevicesBiasStrong => vec![0.767, 0.199, 0.034],
            DataPartition::Custom(f) => {
                let s: f64 = f.iter().sum();
                f.iter().map(|x| x / s).collect()
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            DataPartition::Equal => "equal".into(),
            DataPartition::CloudBiasMild => "cloud_bias_mild".into(),
            DataPartition::CloudBiasStrong => "cloud_bias_strong".into(),
            DataPartition::DevicesBiasStrong => "devices_bias_strong".into(),
            DataPartition::Custom(f) => f
                .iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join("-"),
        }
    }

    /// Samples per client: each layer gets its share of `total`, split
    /// equally among the layer's nodes. Fractional quotas are resolved by
    /// largest remainder so the counts add up to `total` and every client
    /// is within one sample of its quota.
    pub fn allocate(&self, topology: &Topology, total: usize) -> Result<Vec<usize>> {
        let fractions = self.fractions();
        if fractions.len() != topology.num_exits() {
            return Err(Error::InvalidConfig(format!(
                "partition `{}` has {} layers but the tree has {} exits",
                self.name(),
                fractions.len(),
                topology.num_exits()
            )));
        }
        let layer_sizes: Vec<usize> = (1..=topology.num_exits())
            .map(|e| topology.nodes_with_exit(e).len())
            .collect();
        let quotas: Vec<f64> = topology
            .nodes()
            .iter()
            .map(|n| fractions[n.exit - 1] * total as f64 / layer_sizes[n.exit - 1] as f64)
            .collect();
        Ok(largest_remainder(&quotas, total))
    }
}

/// Integer counts summing to `total` with every count within one of its
/// quota. Ties in the remainder go to the lower index.
pub(crate) fn largest_remainder(quotas: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().take(total.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

impl fmt::Display for DataPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for DataPartition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "equal" => DataPartition::Equal,
            "cloud_bias_mild" => DataPartition::CloudBiasMild,
            "cloud_bias_strong" => DataPartition::CloudBiasStrong,
            "devices_bias_strong" => DataPartition::DevicesBiasStrong,
            other => {
                let parts: std::result::Result<Vec<f64>, _> = other.split('-').map(str::parse).collect();
                match parts {
                    Ok(v) if v.len() > 1 && v.iter().all(|&x| x >= 0.0) && v.iter().sum::<f64>() > 0.0 => {
                        DataPartition::Custom(v)
                    }
                    _ => return Err(Error::ConfigParse(format!("unknown partition `{other}`"))),
                }
            }
        })
    }
}

/// Shape of the synthetic classification problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassificationSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub num_exits: usize,
    /// Multiplier on the teacher's backbone weights; larger values make
    /// the labeling function more nonlinear.
    pub teacher_gain: f64,
    pub test_samples: usize,
}

impl Default for ClassificationSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dim: 32,
            num_classes: 3,
            num_exits: 3,
            teacher_gain: 1.0,
            test_samples: 2000,
        }
    }
}

fn draw_features(rng: &mut StreamRng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| rng.sample(StandardNormal)).collect()
}

fn label(arch: &MlpArch, teacher: &[f64], features: &[f64]) -> Vec<usize> {
    features
        .chunks(arch.input_dim)
        .map(|x| arch.predict(teacher, x, arch.num_exits))
        .collect()
}

/// Builds a random teacher network and balances its deepest head so every
/// class is roughly equally likely under the input distribution.
fn build_teacher(arch: &MlpArch, gain: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, &[tag::TEACHER]);
    let mut w = arch.init(&mut rng, gain);
    let calib = draw_features(&mut rng, 4000, arch.input_dim);
    let head = arch.segments().heads[arch.num_exits - 1].clone();
    let bias_start = head.end - arch.num_classes;
    for _ in 0..200 {
        let mut counts = vec![0usize; arch.num_classes];
        for y in label(arch, &w, &calib) {
            counts[y] += 1;
        }
        let n = calib.len() / arch.input_dim;
        let target = 1.0 / arch.num_classes as f64;
        let mut worst: f64 = 0.0;
        for k in 0..arch.num_classes {
            let freq = counts[k] as f64 / n as f64;
            worst = worst.max((freq - target).abs());
            w[bias_start + k] -= 0.5 * (freq - target);
        }
        if worst < 0.02 {
            break;
        }
    }
    w
}

/// Teacher, per-client training sets sized by `partition`, and an i.i.d.
/// test set. Deterministic in `seed`.
pub fn generate_classification_data(
    spec: &ClassificationSpec,
    topology: &Topology,
    partition: &DataPartition,
    total_samples: usize,
    seed: u64,
) -> Result<ClassificationTask> {
    if spec.num_exits != topology.num_exits() {
        return Err(Error::InvalidConfig("model and tree disagree on the number of exits".into()));
    }
    let arch = MlpArch::new(spec.input_dim, spec.hidden_dim, spec.num_classes, spec.num_exits);
    let teacher = build_teacher(&arch, spec.teacher_gain, seed);
    let counts = partition.allocate(topology, total_samples)?;
    let clients = counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let mut rng = rng::stream(seed, &[tag::DATA, c as u64]);
            let features = draw_features(&mut rng, n, arch.input_dim);
            let labels = label(&arch, &teacher, &features);
            Dataset {
                input_dim: arch.input_dim,
                features,
                labels,
            }
        })
        .collect();
    let mut rng = rng::stream(seed, &[tag::TEST]);
    let features = draw_features(&mut rng, spec.test_samples, arch.input_dim);
    let labels = label(&arch, &teacher, &features);
    let test = Dataset {
        input_dim: arch.input_dim,
        features,
        labels,
    };
    Ok(ClassificationTask::new(arch, teacher, clients, test))
}
