//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use eefl::experiment::{run_experiment, ExperimentConfig, ResultRow};
use eefl::fedtrain::{
    aggregate_unprojected, local_update, lr, run_from, sample_round, theory_gamma, LocalUpdate, LrSchedule,
    TrainConfig,
};
use eefl::models::{generate_classification_data, ClassificationSpec, DataPartition, QuadraticSpec, QuadraticTask};
use eefl::rng::{self, tag};
use eefl::strategies::{build_sampling_matrix, equal_weight, exit_pools, flops_prop, ExitPools, ExitWeights, SamplingMatrix};
use eefl::theory::{
    alphas, bias_bound, bound_b, empirical_bias, empirical_opt_error, exact_sampling_variance, grad_second_moment,
    opt_error_bound, sampling_variance_bound, BoundDenominator, TheoryParams,
};
use eefl::topology::{brute_force_rate_plan, compute_rate_plan, grid_search_p1, p1_objective, Topology};
use rand::Rng;

use common::{figure_tree, max_rel_diff, random_tree};

/// Projection radius of the quadratic instances.
const RADIUS: f64 = 3.0;
const LOCAL_STEPS: usize = 4;

/// Shared MLP training setup for the directional criteria.
const DESK_MLP: &str = r#"
[task.mlp]
hidden_dim = 32
teacher_gain = 1.0

[evaluation]
noise_probes = 0
write_reports = false

[train]
rounds = 10
local_steps = 10
batch_size = 32
server_lr = 1.0
lr_schedule = { kind = "cosine", lr = 0.1 }
"#;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn c1_rate_plan_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut worst_conservation = 0.0f64;
    for i in 0..200u64 {
        let mut rng = rng::stream(2024, &[i]);
        let t = random_tree(&mut rng, 15);
        let fast = compute_rate_plan(&t);
        let slow = match brute_force_rate_plan(&t) {
            Ok(p) => p,
            Err(e) => return outcome(false, format!("tree {i}: {e}")),
        };
        worst = worst
            .max(max_rel_diff(&fast.transmit, &slow.transmit))
            .max(max_rel_diff(&fast.serve, &slow.serve))
            .max(max_rel_diff(&fast.lambda_exit, &slow.lambda_exit));
        let arrivals = t.total_arrival();
        let served: f64 = fast.serve.iter().sum();
        worst_conservation = worst_conservation.max((served - arrivals).abs() / arrivals.max(1.0));
    }
    outcome(
        worst <= 1e-12 && worst_conservation <= 1e-12,
        format!("200 trees, max rel diff {worst:.1e}, conservation {worst_conservation:.1e}"),
    )
}

fn c2_p1_equivalence() -> Outcome {
    let step = 0.05;
    let mut worst_gap = f64::NEG_INFINITY;
    let mut pass = true;
    for i in 0..40u64 {
        let mut rng = rng::stream(7, &[i]);
        let arrivals = [
            rng.random_range(0.1..2.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ];
        let budgets = [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)];
        let mut losses: [f64; 3] = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        losses.sort_by(|a, b| b.total_cmp(a));
        if losses[0] == losses[1] || losses[1] == losses[2] {
            continue;
        }
        let t = Topology::chain(&arrivals, &budgets).unwrap();
        let saturating = p1_objective(&t, &compute_rate_plan(&t), &losses);
        let grid = grid_search_p1(&t, &losses, step).unwrap().objective;
        let resolution = step * losses[0] * t.total_arrival();
        let gap = grid - saturating;
        worst_gap = worst_gap.max(gap);
        pass &= gap >= -1e-12 && gap <= resolution;
    }
    outcome(pass, format!("40 chains, largest grid-minus-saturating gap {worst_gap:.3e}"))
}

fn c3_flops_weights() -> Outcome {
    let w = flops_prop(&[78_316_160.0, 694_682_880.0, 1_770_787_840.0]).unwrap();
    let pct: Vec<f64> = w.weights.iter().map(|x| 100.0 * x).collect();
    let target = [3.1, 27.3, 69.6];
    let err = pct.iter().zip(target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(err <= 0.05, format!("{pct:.3?} %, max deviation {err:.3} pp"))
}

struct QuadSetup {
    task: QuadraticTask,
    weights: ExitWeights,
    p: SamplingMatrix,
    pools: ExitPools,
}

fn quad_setup(weights: ExitWeights, k: f64, seed: u64) -> QuadSetup {
    let t = figure_tree(1200);
    let task = QuadraticTask::random(&t, &QuadraticSpec::default(), seed).unwrap();
    let p = build_sampling_matrix(&t, k).unwrap();
    let pools = exit_pools(&t, &p).unwrap();
    QuadSetup { task, weights, p, pools }
}

fn theory_cfg(task: &QuadraticTask, seed: u64, rounds: usize) -> TrainConfig {
    TrainConfig {
        rounds,
        local_steps: LOCAL_STEPS,
        batch_size: 1,
        server_lr: 1.0,
        lr_schedule: LrSchedule::Theory {
            mu: task.mu(),
            smoothness: task.smoothness(),
            gamma: None,
        },
        projection_radius: RADIUS,
        seed,
        ..Default::default()
    }
}

/// `models[c][e - 1]`, present for pairs with positive sampling probability.
type PairModels = Vec<Vec<Option<Vec<f64>>>>;

/// Round-1 local models of every pair in the pools, from a common start.
fn frozen_updates(s: &QuadSetup, cfg: &TrainConfig) -> (Vec<f64>, PairModels) {
    let mut w_t = s.task_init(cfg.seed);
    eefl::fedtrain::project(&mut w_t, RADIUS);
    let models = (0..s.p.num_clients())
        .map(|c| {
            (1..=s.p.num_exits())
                .map(|e| {
                    (s.p.get(c, e) > 0.0).then(|| {
                        let mut rng = rng::stream(cfg.seed, &[tag::LOCAL, 1, c as u64, e as u64]);
                        local_update(&s.task, &w_t, c, e, 1, cfg, &mut rng).unwrap()
                    })
                })
                .collect()
        })
        .collect();
    (w_t, models)
}

impl QuadSetup {
    fn task_init(&self, seed: u64) -> Vec<f64> {
        use eefl::models::Task;
        self.task.init_params(&mut rng::stream(seed, &[tag::INIT]))
    }

    /// `w_t + sum_{c,e} alpha_{c,e} (w^{(c,e)} - w_t)`.
    fn expected_aggregate(&self, w_t: &[f64], models: &[Vec<Option<Vec<f64>>>]) -> Vec<f64> {
        let mut out = w_t.to_vec();
        for a in alphas(&self.weights, &self.pools, 1.0) {
            let m = models[a.client][a.exit - 1].as_ref().unwrap();
            for ((o, x), w0) in out.iter_mut().zip(m).zip(w_t) {
                *o += a.value * (x - w0);
            }
        }
        out
    }

    fn sampled_aggregate(&self, w_t: &[f64], models: &[Vec<Option<Vec<f64>>>], seed: u64, draw: u64) -> Vec<f64> {
        let sample = sample_round(&self.p, seed, draw);
        let updates: Vec<LocalUpdate> = sample
            .pairs
            .iter()
            .map(|&(c, e)| LocalUpdate {
                client: c,
                exit: e,
                model: models[c][e - 1].clone().unwrap(),
            })
            .collect();
        aggregate_unprojected(w_t, &updates, &self.weights, &self.p, &self.pools, 1.0).unwrap()
    }
}

fn c4_unbiasedness() -> Outcome {
    let draws = 100_000u64;
    let mut worst_z = 0.0f64;
    for k in [0.1, 0.2] {
        let s = quad_setup(ExitWeights::normalize(&[0.8, 0.15, 0.05]).unwrap(), k, 4);
        let cfg = theory_cfg(&s.task, 4, 1);
        let (w_t, models) = frozen_updates(&s, &cfg);
        let expected = s.expected_aggregate(&w_t, &models);
        let d = w_t.len();
        let mut sum = vec![0.0; d];
        let mut sum_sq = vec![0.0; d];
        for r in 0..draws {
            let agg = s.sampled_aggregate(&w_t, &models, 99, r);
            for j in 0..d {
                // Centered on the expectation for numerical stability.
                let x = agg[j] - expected[j];
                sum[j] += x;
                sum_sq[j] += x * x;
            }
        }
        let n = draws as f64;
        for j in 0..d {
            let mean = sum[j] / n;
            let var = (sum_sq[j] / n - mean * mean) * n / (n - 1.0);
            let se = (var / n).sqrt();
            let z = if se > 0.0 { mean.abs() / se } else if mean.abs() < 1e-12 { 0.0 } else { f64::INFINITY };
            worst_z = worst_z.max(z);
        }
    }
    outcome(worst_z <= 4.0, format!("k in {{0.1, 0.2}}, 1e5 draws, max |mean - exact| = {worst_z:.2} SE"))
}

fn c5_variance_bound() -> Outcome {
    let draws = 20_000u64;
    let mut pass = true;
    let mut detail = Vec::new();
    for k in [0.1, 0.2] {
        let s = quad_setup(ExitWeights::normalize(&[0.8, 0.15, 0.05]).unwrap(), k, 5);
        let cfg = theory_cfg(&s.task, 5, 1);
        let (w_t, models) = frozen_updates(&s, &cfg);
        let expected = s.expected_aggregate(&w_t, &models);
        let mut total = 0.0;
        for r in 0..draws {
            let agg = s.sampled_aggregate(&w_t, &models, 77, r);
            total += agg.iter().zip(&expected).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        let empirical = total / draws as f64;
        let alpha = alphas(&s.weights, &s.pools, 1.0);
        let deltas: Vec<Vec<Option<Vec<f64>>>> = models
            .iter()
            .map(|row| {
                row.iter()
                    .map(|m| m.as_ref().map(|m| m.iter().zip(&w_t).map(|(a, b)| a - b).collect()))
                    .collect()
            })
            .collect();
        let exact = exact_sampling_variance(&alpha, &s.p, &deltas).unwrap();
        let params = TheoryParams::from_quadratic(&s.task, &s.weights, &s.pools, RADIUS).unwrap();
        let bound = sampling_variance_bound(&alpha, &s.p, &grad_second_moment(&params), lr(1, 0, &cfg), LOCAL_STEPS)
            .unwrap();
        pass &= empirical <= 1.1 * bound;
        detail.push(format!("k={k}: empirical {empirical:.3e} (exact {exact:.3e}) <= bound {bound:.3e}"));
    }
    outcome(pass, detail.join("; "))
}

fn c6_opt_bound() -> Outcome {
    let horizons = [50usize, 500, 5000];
    let s = quad_setup(equal_weight(3), 0.1, 6);
    let params = TheoryParams::from_quadratic(&s.task, &s.weights, &s.pools, RADIUS).unwrap();
    let b = bound_b(&params, &alphas(&s.weights, &s.pools, 1.0), &s.p, LOCAL_STEPS).unwrap();
    let w_star = s.task.minimizers(&s.weights, &s.pools).unwrap().w_star;
    let seeds = 10;
    let mut errors = [0.0; 3];
    let mut dist_sq = 0.0;
    for seed in 1..=seeds {
        let cfg = TrainConfig {
            keep_snapshots: true,
            ..theory_cfg(&s.task, seed, 5000)
        };
        let out = run_from(&s.task, &s.weights, &s.p, &s.pools, &cfg, None).unwrap();
        let snaps = &out.trajectory.snapshots;
        dist_sq += snaps[0].iter().zip(&w_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / seeds as f64;
        for (slot, &t) in horizons.iter().enumerate() {
            errors[slot] += empirical_opt_error(&s.task, &snaps[t..=t], &s.weights, &s.pools).unwrap() / seeds as f64;
        }
    }
    let bounds: Vec<f64> = horizons
        .iter()
        .map(|&t| opt_error_bound(&params, b.total, t, LOCAL_STEPS, dist_sq, BoundDenominator::LocalSteps))
        .collect();
    let gamma = theory_gamma(params.kappa(), LOCAL_STEPS);
    let j = LOCAL_STEPS as f64;
    let ratio = errors[2] / errors[1];
    let ratio_cap = 1.5 * (gamma + 500.0 * j) / (gamma + 5000.0 * j);
    let within = errors.iter().zip(&bounds).all(|(e, b)| e <= b);
    outcome(
        within && ratio <= ratio_cap,
        format!(
            "errors {errors} vs bounds {bounds}; error(5000)/error(500) = {ratio:.3} <= {ratio_cap:.3}",
            errors = sci(&errors),
            bounds = sci(&bounds),
        ),
    )
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Random point of the simplex; some coordinates may be zero.
fn random_simplex(rng: &mut eefl::rng::StreamRng, n: usize) -> ExitWeights {
    let raw: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { -rng.random::<f64>().max(1e-300).ln() })
        .collect();
    if raw.iter().all(|&x| x == 0.0) {
        return equal_weight(n);
    }
    ExitWeights::normalize(&raw).unwrap()
}

fn c7_bias_bound() -> Outcome {
    let s = quad_setup(equal_weight(3), 0.1, 7);
    let cap = s.task.loss_cap(RADIUS);
    let mut worst_ratio = 0.0f64;
    let mut pass = true;
    for i in 0..20u64 {
        let mut rng = rng::stream(7, &[tag::PROBE, 10_000 + i]);
        let a = random_simplex(&mut rng, 3);
        let b = random_simplex(&mut rng, 3);
        let gap = empirical_bias(&s.task, &a, &b, &s.pools, cap, RADIUS, 1000, i);
        let bound = bias_bound(cap, &a, &b).unwrap();
        pass &= gap <= bound + 1e-12;
        if bound > 0.0 {
            worst_ratio = worst_ratio.max(gap / bound);
        }
    }
    outcome(pass, format!("20 pairs x 1e3 probes, M = {cap:.3}, largest gap/bound = {worst_ratio:.3}"))
}

fn c8_gradient_check() -> Outcome {
    let t = figure_tree(1200);
    let task = generate_classification_data(&ClassificationSpec::default(), &t, &DataPartition::Equal, 1200, 8).unwrap();
    let data = task.pooled_training_data();
    let arch = &task.arch;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for draw in 0..3u64 {
        let mut rng = rng::stream(8, &[tag::PROBE, draw]);
        let w = arch.init(&mut rng, 1.0);
        let batch: Vec<usize> = (0..16).map(|_| rng.random_range(0..data.len())).collect();
        for exit in 1..=arch.num_exits {
            let mut g = vec![0.0; w.len()];
            arch.loss_and_grad(&w, exit, &data, &batch, Some(&mut g));
            let mut wp = w.clone();
            for i in 0..w.len() {
                wp[i] = w[i] + h;
                let up = arch.loss_and_grad(&wp, exit, &data, &batch, None);
                wp[i] = w[i] - h;
                let down = arch.loss_and_grad(&wp, exit, &data, &batch, None);
                wp[i] = w[i];
                let fd = (up - down) / (2.0 * h);
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
    }
    outcome(worst <= 1e-5, format!("3 draws x 3 exits, max relative error {worst:.2e}"))
}

fn desk_config(head: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!("{head}\n{DESK_MLP}")).unwrap()
}

/// Mean `weighted_acc` over seeds per `(split, strategy, k)`.
fn group_means(rows: &[ResultRow]) -> BTreeMap<(String, String, String), f64> {
    let mut acc: BTreeMap<(String, String, String), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc
            .entry((r.split.clone(), r.strategy.clone(), r.k.to_string()))
            .or_default();
        e.0 += r.weighted_acc.unwrap();
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn key(split: &str, strategy: &str, k: &str) -> (String, String, String) {
    (split.into(), strategy.into(), k.into())
}

fn c9_table2_direction() -> Outcome {
    let cfg = desk_config(
        r#"splits = ["80-15-5", "33-33-33"]
partitions = ["equal"]
total_samples = 1200
strategies = ["equal", "serving_rate"]
seeds = [1, 2, 3, 4, 5]"#,
    );
    let out = run_experiment(&cfg, None).unwrap();
    let means = group_means(&out.rows);
    let equal = means[&key("80-15-5", "equal", "0")];
    let serving = means[&key("80-15-5", "serving_rate", "0")];
    let mut identical = true;
    for a in out.rows.iter().filter(|r| r.split == "33-33-33" && r.strategy == "equal") {
        let b = out
            .rows
            .iter()
            .find(|r| r.split == "33-33-33" && r.strategy == "serving_rate" && r.seed == a.seed)
            .unwrap();
        identical &= a.exit_acc == b.exit_acc
            && a.weighted_acc == b.weighted_acc
            && a.system_acc_routed == b.system_acc_routed
            && a.weighted_loss == b.weighted_loss
            && a.tv == b.tv
            && a.gen_proxy == b.gen_proxy;
    }
    let delta = 100.0 * (serving - equal);
    outcome(
        delta >= 1.0 && identical,
        format!(
            "80-15-5: serving_rate {serving:.4} vs equal {equal:.4} ({delta:+.2} pp); 33-33-33 bit-identical: {identical}"
        ),
    )
}

fn c10_figure3_direction() -> Outcome {
    let cfg = desk_config(
        r#"splits = ["80-15-5", "60-30-10"]
partitions = ["cloud_bias_strong"]
total_samples = 1200
strategies = ["serving_rate"]
k = [0.0, 0.2]
seeds = [1, 2, 3, 4, 5]"#,
    );
    let out = run_experiment(&cfg, None).unwrap();
    let means = group_means(&out.rows);
    let mut pass = true;
    let mut detail = Vec::new();
    for split in ["80-15-5", "60-30-10"] {
        let k0 = means[&key(split, "serving_rate", "0")];
        let k2 = means[&key(split, "serving_rate", "0.2")];
        pass &= k2 >= k0;
        detail.push(format!("{split}: k=0.2 {k2:.4} vs k=0 {k0:.4}"));
    }
    outcome(pass, detail.join("; "))
}

fn c11_determinism() -> Outcome {
    let mlp = desk_config(
        r#"splits = ["80-15-5"]
partitions = ["equal", "cloud_bias_strong"]
total_samples = 600
strategies = ["equal", "serving_rate", "gen_error_adj"]
k = [0.0, 0.2]
seeds = [1, 2]"#,
    );
    let quad = ExperimentConfig::from_toml_str(
        r#"splits = ["60-30-10"]
total_samples = 600
strategies = ["serving_rate", "flops_prop"]
k = [0.1]
seeds = [3]
[task]
kind = "quadratic"
[evaluation]
bias_probes = 200
[train]
rounds = 200
local_steps = 4
projection_radius = 3.0
lr_schedule = { kind = "theory", mu = 1.0, smoothness = 2.0 }"#,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut pass = true;
    for (name, cfg) in [("mlp", mlp), ("quadratic", quad)] {
        let mut outputs = Vec::new();
        for (run, threads) in [Some(1), None].into_iter().enumerate() {
            let cfg = ExperimentConfig { threads, ..cfg.clone() };
            let path = dir.path().join(format!("{name}{run}"));
            run_experiment(&cfg, Some(&path)).unwrap();
            outputs.push(std::fs::read(path.join("results.csv")).unwrap());
        }
        pass &= outputs[0] == outputs[1] && !outputs[0].is_empty();
    }
    outcome(pass, "MLP and quadratic sweeps, results.csv byte-identical across reruns and thread counts")
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);
    let criteria: [Criterion; 11] = [
        ("rate-plan oracle equivalence", c1_rate_plan_oracle, Some(Duration::from_secs(5))),
        ("saturating plan solves P1", c2_p1_equivalence, Some(Duration::from_secs(10))),
        ("FLOPS-proportional weights", c3_flops_weights, None),
        ("aggregation unbiasedness", c4_unbiasedness, Some(Duration::from_secs(30))),
        ("sampling variance bound", c5_variance_bound, Some(Duration::from_secs(30))),
        ("optimization-error bound", c6_opt_bound, Some(Duration::from_secs(120))),
        ("bias bound", c7_bias_bound, Some(Duration::from_secs(30))),
        ("MLP gradient check", c8_gradient_check, Some(Duration::from_secs(30))),
        ("serving_rate beats equal on 80-15-5", c9_table2_direction, Some(Duration::from_secs(300))),
        ("k = 0.2 beats k = 0 under strong cloud bias", c10_figure3_direction, Some(Duration::from_secs(300))),
        ("byte-identical reruns", c11_determinism, None),
    ];
    let suite = Instant::now();
    let mut failures = 0;
    for (i, (name, check, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|l| elapsed <= l);
        let pass = result.pass && in_time;
        failures += usize::from(!pass);
        let limit_note = limit.map(|l| format!(" (limit {}s)", l.as_secs())).unwrap_or_default();
        println!(
            "{} {:>2}. {name}: {} [{:.2}s{limit_note}]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            elapsed.as_secs_f64()
        );
    }
    let total = suite.elapsed();
    let pass = total <= Duration::from_secs(15 * 60);
    failures += usize::from(!pass);
    println!(
        "{} 12. full suite runtime: {:.1}s (limit 900s)",
        if pass { "PASS" } else { "FAIL" },
        total.as_secs_f64()
    );
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
