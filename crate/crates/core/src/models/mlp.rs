//! Early-exit multilayer perceptron with hand-written backpropagation.
//!
//! The backbone is a stack of `num_exits` dense tanh blocks; each block is
//! followed by a linear softmax head. Exit `e` runs blocks `1..=e` and
//! head `e`. Parameters live in one flat vector: blocks first (weights
//! row-major, then biases), then heads in the same format.

use rand::Rng;
use rand_distr::StandardNormal;

use super::data::Dataset;
use super::{SegmentMap, Task};
use crate::error::{Error, Result};
use crate::rng::{self, tag, StreamRng};

#[derive(Clone, Debug, PartialEq)]
pub struct MlpArch {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub num_exits: usize,
    segments: SegmentMap,
}

impl MlpArch {
    pub fn new(input_dim: usize, hidden_dim: usize, num_classes: usize, num_exits: usize) -> Self {
        assert!(input_dim > 0 && hidden_dim > 0 && num_classes > 1 && num_exits > 0);
        let mut offset = 0;
        let mut blocks = Vec::with_capacity(num_exits);
        for b in 0..num_exits {
            let fan_in = if b == 0 { input_dim } else { hidden_dim };
            let len = hidden_dim * fan_in + hidden_dim;
            blocks.push(offset..offset + len);
            offset += len;
        }
        let mut heads = Vec::with_capacity(num_exits);
        for _ in 0..num_exits {
            let len = num_classes * hidden_dim + num_classes;
            heads.push(offset..offset + len);
            offset += len;
        }
        Self {
            input_dim,
            hidden_dim,
            num_classes,
            num_exits,
            segments: SegmentMap {
                dim: offset,
                blocks,
                heads,
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.segments.dim
    }

    pub fn segments(&self) -> &SegmentMap {
        &self.segments
    }

    fn block_fan_in(&self, b: usize) -> usize {
        if b == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }

    /// Gaussian weights with variance `gain^2 / fan_in`, zero biases.
    pub fn init(&self, rng: &mut StreamRng, gain: f64) -> Vec<f64> {
        let mut w = vec![0.0; self.dim()];
        for b in 0..self.num_exits {
            let fan_in = self.block_fan_in(b);
            let start = self.segments.blocks[b].start;
            let scale = gain / (fan_in as f64).sqrt();
            for v in &mut w[start..start + self.hidden_dim * fan_in] {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for e in 0..self.num_exits {
            let start = self.segments.heads[e].start;
            let scale = gain / (self.hidden_dim as f64).sqrt();
            for v in &mut w[start..start + self.num_classes * self.hidden_dim] {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        w
    }

    /// Multiply-accumulate count of one inference at `exit`, times two.
    pub fn flops(&self, exit: usize) -> f64 {
        let mut macs = 0;
        for b in 0..exit {
            macs += self.block_fan_in(b) * self.hidden_dim;
        }
        macs += self.hidden_dim * self.num_classes;
        2.0 * macs as f64
    }

    /// Activations of blocks `1..=depth`; `acts[0]` is the input.
    fn forward(&self, w: &[f64], x: &[f64], depth: usize, acts: &mut Vec<Vec<f64>>) {
        acts.clear();
        acts.push(x.to_vec());
        for b in 0..depth {
            let fan_in = self.block_fan_in(b);
            let start = self.segments.blocks[b].start;
            let weights = &w[start..start + self.hidden_dim * fan_in];
            let bias = &w[start + self.hidden_dim * fan_in..self.segments.blocks[b].end];
            let prev = &acts[b];
            let out: Vec<f64> = (0..self.hidden_dim)
                .map(|i| {
                    let row = &weights[i * fan_in..(i + 1) * fan_in];
                    let z = bias[i] + row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>();
                    z.tanh()
                })
                .collect();
            acts.push(out);
        }
    }

    fn head_logits(&self, w: &[f64], h: &[f64], exit: usize) -> Vec<f64> {
        let head = &self.segments.heads[exit - 1];
        let weights = &w[head.start..head.start + self.num_classes * self.hidden_dim];
        let bias = &w[head.start + self.num_classes * self.hidden_dim..head.end];
        (0..self.num_classes)
            .map(|k| {
                let row = &weights[k * self.hidden_dim..(k + 1) * self.hidden_dim];
                bias[k] + row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn logits(&self, w: &[f64], x: &[f64], exit: usize) -> Vec<f64> {
        let mut acts = Vec::with_capacity(exit + 1);
        self.forward(w, x, exit, &mut acts);
        self.head_logits(w, &acts[exit], exit)
    }

    pub fn probabilities(&self, w: &[f64], x: &[f64], exit: usize) -> Vec<f64> {
        softmax(&self.logits(w, x, exit))
    }

    /// Argmax class at `exit`; ties go to the lowest index.
    pub fn predict(&self, w: &[f64], x: &[f64], exit: usize) -> usize {
        argmax(&self.logits(w, x, exit))
    }

    /// Mean cross-entropy of `exit` over the rows `idx` of `data`. When
    /// `grad` is given it is overwritten with the gradient of that mean.
    pub fn loss_and_grad(
        &self,
        w: &[f64],
        exit: usize,
        data: &Dataset,
        idx: &[usize],
        mut grad: Option<&mut [f64]>,
    ) -> f64 {
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        if idx.is_empty() {
            return 0.0;
        }
        let h = self.hidden_dim;
        let mut acts = Vec::with_capacity(exit + 1);
        let mut total = 0.0;
        for &s in idx {
            let x = data.row(s);
            let y = data.labels[s];
            self.forward(w, x, exit, &mut acts);
            let logits = self.head_logits(w, &acts[exit], exit);
            let lse = log_sum_exp(&logits);
            total += lse - logits[y];
            let Some(g) = grad.as_deref_mut() else { continue };

            let mut dlogits: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
            dlogits[y] -= 1.0;
            let head = &self.segments.heads[exit - 1];
            let hw = head.start;
            let hb = head.start + self.num_classes * h;
            let mut dh = vec![0.0; h];
            for k in 0..self.num_classes {
                let d = dlogits[k];
                g[hb + k] += d;
                for i in 0..h {
                    g[hw + k * h + i] += d * acts[exit][i];
                    dh[i] += d * w[hw + k * h + i];
                }
            }
            for b in (0..exit).rev() {
                let fan_in = self.block_fan_in(b);
                let start = self.segments.blocks[b].start;
                let bias = start + h * fan_in;
                let out = &acts[b + 1];
                let inp = &acts[b];
                let dz: Vec<f64> = dh.iter().zip(out).map(|(d, a)| d * (1.0 - a * a)).collect();
                let mut dprev = vec![0.0; fan_in];
                for i in 0..h {
                    g[bias + i] += dz[i];
                    let row = start + i * fan_in;
                    for j in 0..fan_in {
                        g[row + j] += dz[i] * inp[j];
                        dprev[j] += dz[i] * w[row + j];
                    }
                }
                dh = dprev;
            }
        }
        let n = idx.len() as f64;
        if let Some(g) = grad {
            for v in g.iter_mut() {
                *v /= n;
            }
        }
        total / n
    }

    /// Mean cross-entropy of `exit` over a whole dataset.
    pub fn dataset_loss(&self, w: &[f64], exit: usize, data: &Dataset) -> f64 {
        let idx: Vec<usize> = (0..data.len()).collect();
        self.loss_and_grad(w, exit, data, &idx, None)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| (z - lse).exp()).collect()
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = k;
        }
    }
    best
}

/// Fraction of `data` whose head-`exit` argmax equals the label.
pub fn exit_accuracy(arch: &MlpArch, w: &[f64], exit: usize, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let correct = (0..data.len())
        .filter(|&i| arch.predict(w, data.row(i), exit) == data.labels[i])
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Early-exit MLP task: per-client teacher-labeled training sets plus an
/// i.i.d. test set.
#[derive(Clone, Debug)]
pub struct ClassificationTask {
    pub arch: MlpArch,
    pub teacher: Vec<f64>,
    pub clients: Vec<Dataset>,
    pub test: Dataset,
}

impl ClassificationTask {
    pub fn new(arch: MlpArch, teacher: Vec<f64>, clients: Vec<Dataset>, test: Dataset) -> Self {
        Self {
            arch,
            teacher,
            clients,
            test,
        }
    }

    pub fn pooled_training_data(&self) -> Dataset {
        Dataset::concat(&self.clients)
    }

    pub fn flops(&self) -> Vec<f64> {
        (1..=self.arch.num_exits).map(|e| self.arch.flops(e)).collect()
    }

    /// Minimizes the joint objective `sum_e weight_e * loss_e` on one
    /// machine with plain mini-batch SGD.
    pub fn train_joint(&self, weights: &[f64], steps: usize, batch: usize, lr: f64, seed: u64) -> Vec<f64> {
        let data = self.pooled_training_data();
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let mut w = self.arch.init(&mut rng, 1.0);
        let mut rng = rng::stream(seed, &[tag::LOCAL]);
        let mut g = vec![0.0; w.len()];
        let mut acc = vec![0.0; w.len()];
        for _ in 0..steps {
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.len())).collect();
            acc.fill(0.0);
            for (e, &lw) in weights.iter().enumerate() {
                if lw == 0.0 {
                    continue;
                }
                self.arch.loss_and_grad(&w, e + 1, &data, &idx, Some(&mut g));
                for (a, gi) in acc.iter_mut().zip(&g) {
                    *a += lw * gi;
                }
            }
            for (wi, a) in w.iter_mut().zip(&acc) {
                *wi -= lr * a;
            }
        }
        w
    }
}

impl Task for ClassificationTask {
    fn dim(&self) -> usize {
        self.arch.dim()
    }

    fn num_exits(&self) -> usize {
        self.arch.num_exits
    }

    fn segments(&self) -> &SegmentMap {
        self.arch.segments()
    }

    fn num_clients(&self) -> usize {
        self.clients.len()
    }

    fn client_size(&self, client: usize) -> usize {
        self.clients[client].len()
    }

    fn batch_gradient(
        &self,
        w: &[f64],
        client: usize,
        exit: usize,
        batch: &[usize],
        _rng: &mut StreamRng,
        out: &mut [f64],
    ) {
        self.arch.loss_and_grad(w, exit, &self.clients[client], batch, Some(out));
    }

    fn client_loss(&self, w: &[f64], client: usize, exit: usize) -> f64 {
        self.arch.dataset_loss(w, exit, &self.clients[client])
    }

    fn init_params(&self, rng: &mut StreamRng) -> Vec<f64> {
        self.arch.init(rng, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_data(arch: &MlpArch, n: usize, seed: u64) -> Dataset {
        let mut rng = rng::stream(seed, &[42]);
        let features: Vec<f64> = (0..n * arch.input_dim).map(|_| rng.sample(StandardNormal)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..arch.num_classes)).collect();
        Dataset {
            input_dim: arch.input_dim,
            features,
            labels,
        }
    }

    #[test]
    fn layout_sizes() {
        let arch = MlpArch::new(16, 32, 3, 3);
        assert_eq!(arch.dim(), 16 * 32 + 32 + 2 * (32 * 32 + 32) + 3 * (32 * 3 + 3));
        let m = arch.segments();
        assert_eq!(m.blocks[0].start, 0);
        assert_eq!(m.heads[2].end, arch.dim());
    }

    #[test]
    fn zero_heads_give_log_c() {
        let arch = MlpArch::new(4, 5, 3, 2);
        let mut w = arch.init(&mut rng::stream(1, &[]), 1.0);
        for e in 0..2 {
            let r = arch.segments().heads[e].clone();
            w[r].fill(0.0);
        }
        let data = toy_data(&arch, 7, 2);
        for exit in 1..=2 {
            assert!((arch.dataset_loss(&w, exit, &data) - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn inactive_coordinates_have_zero_gradient() {
        let arch = MlpArch::new(4, 5, 3, 3);
        let w = arch.init(&mut rng::stream(3, &[]), 1.0);
        let data = toy_data(&arch, 6, 4);
        let mut g = vec![0.0; arch.dim()];
        for exit in 1..=3 {
            arch.loss_and_grad(&w, exit, &data, &[0, 1, 2, 5], Some(&mut g));
            let mask = arch.segments().active_mask(exit);
            for (i, (&gi, &active)) in g.iter().zip(&mask).enumerate() {
                if !active {
                    assert_eq!(gi, 0.0, "coordinate {i} for exit {exit}");
                }
            }
            assert!(g.iter().zip(&mask).any(|(&gi, &a)| a && gi != 0.0));
        }
    }

    #[test]
    fn backbone_active_sets_are_nested() {
        let arch = MlpArch::new(4, 5, 3, 3);
        let m = arch.segments();
        for e in 1..3 {
            let a = m.active_mask(e);
            let b = m.active_mask(e + 1);
            for r in &m.blocks {
                for i in r.clone() {
                    assert!(!a[i] || b[i]);
                }
            }
        }
    }

    #[test]
    fn teacher_is_perfect_on_its_own_labels() {
        let arch = MlpArch::new(6, 8, 4, 3);
        let teacher = arch.init(&mut rng::stream(5, &[]), 2.0);
        let mut data = toy_data(&arch, 50, 6);
        data.labels = (0..50).map(|i| arch.predict(&teacher, data.row(i), 3)).collect();
        assert_eq!(exit_accuracy(&arch, &teacher, 3, &data).unwrap(), 1.0);
        assert!(matches!(exit_accuracy(&arch, &teacher, 3, &Dataset::default()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn flops_grow_with_depth() {
        let arch = MlpArch::new(16, 32, 3, 3);
        assert_eq!(arch.flops(1), 2.0 * (16.0 * 32.0 + 32.0 * 3.0));
        assert!(arch.flops(1) < arch.flops(2) && arch.flops(2) < arch.flops(3));
    }
}
