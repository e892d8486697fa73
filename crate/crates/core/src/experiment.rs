//! Configured sweeps over seeds, data partitions, serving splits, training
//! strategies and sampling levels, with deterministic CSV and JSON output.
//!
//! A config is a TOML file:
//!
//! ```toml
//! splits = ["80-15-5", "33-33-33"]      # or: budgets = [0.0, 0.5, ...]
//! partitions = ["equal"]
//! total_samples = 1200
//! strategies = ["equal", "serving_rate"]
//! k = [0.0]
//! seeds = [1, 2, 3]
//!
//! [topology]
//! preset = "cloud_edge_device"          # or a [[topology.nodes]] list
//!
//! [task]
//! kind = "mlp"                          # or "quadratic"
//!
//! [train]
//! rounds = 10
//! local_steps = 10
//! lr_schedule = { kind = "cosine", lr = 0.1 }
//! ```
//!
//! Each `(seed, partition, split, strategy, k)` cell is trained and
//! evaluated independently. Rows of `results.csv` are sorted by that tuple
//! and each cell also writes `runs/<cell>/report.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedtrain::{self, project, LrSchedule, TrainConfig};
use crate::models::{
    exit_accuracy, generate_classification_data, weighted_objective, ClassificationSpec, DataPartition,
    QuadraticSpec, QuadraticTask, Task,
};
use crate::rng::{self, tag};
use crate::serving::{simulate_serving, weighted_quality, Ranking, ServingOutcome};
use crate::strategies::{build_sampling_matrix, exit_pools, ExitPools, ExitWeights, SamplingMatrix, Strategy};
use crate::theory::{
    self, alphas, bias_bound, bound_b, bound_b_from_parts, empirical_bias, gen_proxy, opt_error_bound,
    tv_distance, BoundDenominator, ErrorReport, HorizonValue, NoiseEstimate, PairValue, SecondMoment, TheoryParams,
};
use crate::topology::{budgets_for_split, compute_rate_plan, NodeSpec, RatePlan, Topology};

/// Tolerance between a requested split and the rate plan its budgets give.
const SPLIT_TOL: f64 = 1e-9;

/// A per-exit serving split written as percentages, devices first
/// (`"80-15-5"`). Shares are the percentages divided by their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub label: String,
    pub shares: Vec<f64>,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: std::result::Result<Vec<f64>, _> = s.split('-').map(|p| p.trim().parse::<f64>()).collect();
        let parts = parts.map_err(|_| Error::ConfigParse(format!("cannot parse split `{s}`")))?;
        let sum: f64 = parts.iter().sum();
        if parts.len() < 2 || parts.iter().any(|&x| !(x >= 0.0)) || !(sum > 0.0) {
            return Err(Error::ConfigParse(format!("invalid split `{s}`")));
        }
        Ok(Self {
            label: s.to_string(),
            shares: parts.iter().map(|x| x / sum).collect(),
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    /// Named tree; `cloud_edge_device` is the 7-node cloud/edge/device tree.
    pub preset: Option<String>,
    pub nodes: Option<Vec<NodeSpec>>,
    pub num_exits: Option<usize>,
}

impl TopologyConfig {
    pub fn build(&self) -> Result<Topology> {
        match (&self.preset, &self.nodes) {
            (Some(_), Some(_)) => Err(Error::ConfigParse("give either a topology preset or nodes, not both".into())),
            (None, Some(nodes)) => match self.num_exits {
                Some(e) => Topology::new(nodes.clone(), e),
                None => Topology::from_nodes(nodes.clone()),
            },
            (Some(p), None) if p == "cloud_edge_device" => Ok(Topology::cloud_edge_device()),
            (Some(p), None) => Err(Error::ConfigParse(format!("unknown topology preset `{p}`"))),
            (None, None) => Ok(Topology::cloud_edge_device()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Mlp,
    Quadratic,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub mlp: ClassificationSpec,
    pub quadratic: QuadraticSpec,
    /// Per-exit cost used by `flops_prop` and the generalization proxy.
    /// Defaults to the MLP's FLOPS, or all ones for the quadratic task.
    pub flops: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ranking: Ranking,
    /// Monte Carlo probes for the MLP noise estimate; 0 skips it.
    pub noise_probes: usize,
    /// Probe points for the empirical bias on the quadratic task.
    pub bias_probes: usize,
    pub write_reports: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ranking: Ranking::Entropy,
            noise_probes: 100,
            bias_probes: 1000,
            write_reports: true,
        }
    }
}

fn default_partitions() -> Vec<String> {
    vec!["equal".into()]
}

fn default_k() -> Vec<f64> {
    vec![0.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub topology: TopologyConfig,
    #[serde(default)]
    pub splits: Vec<String>,
    #[serde(default)]
    pub budgets: Option<Vec<f64>>,
    #[serde(default = "default_partitions")]
    pub partitions: Vec<String>,
    pub total_samples: usize,
    #[serde(default)]
    pub task: TaskConfig,
    pub strategies: Vec<String>,
    #[serde(default = "default_k")]
    pub k: Vec<f64>,
    #[serde(default)]
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub evaluation: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::ConfigParse(e.to_string().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::ConfigParse(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Checks names and shapes and expands the sweep into cells.
    pub fn plan(&self) -> Result<SweepPlan> {
        let topology = self.topology.build()?;
        let serving = match (self.splits.is_empty(), &self.budgets) {
            (false, None) => self
                .splits
                .iter()
                .map(|s| s.parse().map(Serving::Split))
                .collect::<Result<Vec<_>>>()?,
            (true, Some(b)) => vec![Serving::Budgets(b.clone())],
            _ => {
                return Err(Error::ConfigParse(
                    "exactly one of `splits` or `budgets` must be given".into(),
                ))
            }
        };
        let partitions = self
            .partitions
            .iter()
            .map(|p| p.parse())
            .collect::<Result<Vec<DataPartition>>>()?;
        let strategies = self
            .strategies
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<Strategy>>>()?;
        if self.seeds.is_empty() || strategies.is_empty() || partitions.is_empty() || self.k.is_empty() {
            return Err(Error::ConfigParse("seeds, strategies, partitions and k must be nonempty".into()));
        }
        if let Some(f) = &self.task.flops {
            if f.len() != topology.num_exits() {
                return Err(Error::ConfigParse("one flops entry per exit required".into()));
            }
        }
        self.train.validate()?;
        let mut cells = Vec::new();
        for &seed in &self.seeds {
            for partition in &partitions {
                for serving in &serving {
                    for &strategy in &strategies {
                        for &k in &self.k {
                            cells.push(Cell {
                                seed,
                                partition: partition.clone(),
                                serving: serving.clone(),
                                strategy,
                                k,
                            });
                        }
                    }
                }
            }
        }
        Ok(SweepPlan { topology, cells })
    }
}

/// How the serving rates of a cell are specified.
#[derive(Clone, Debug, PartialEq)]
pub enum Serving {
    Split(Split),
    Budgets(Vec<f64>),
}

impl Serving {
    pub fn label(&self) -> String {
        match self {
            Serving::Split(s) => s.label.clone(),
            Serving::Budgets(_) => "budgets".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub seed: u64,
    pub partition: DataPartition,
    pub serving: Serving,
    pub strategy: Strategy,
    pub k: f64,
}

#[derive(Clone, Debug)]
pub struct SweepPlan {
    pub topology: Topology,
    pub cells: Vec<Cell>,
}

/// One line of `results.csv`. Metrics that do not apply to the task are
/// `None` and written as empty fields.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub seed: u64,
    pub partition: String,
    pub split: String,
    pub strategy: String,
    pub k: f64,
    pub exit_acc: Vec<Option<f64>>,
    pub weighted_acc: Option<f64>,
    pub system_acc_routed: Option<f64>,
    pub weighted_loss: f64,
    pub tv: f64,
    pub gen_proxy: f64,
    pub opt_bound: Option<f64>,
    pub empirical_opt_error: Option<f64>,
}

impl ResultRow {
    /// Directory name of the row's report.
    pub fn slug(&self) -> String {
        format!(
            "seed{}_{}_{}_{}_k{}",
            self.seed, self.partition, self.split, self.strategy, self.k
        )
    }
}

/// Everything recorded about one cell.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub partition: String,
    pub split: String,
    pub strategy: String,
    pub k: f64,
    /// Aggregation weights used for training.
    pub weights: Vec<f64>,
    /// Serving rates per exit the model is evaluated against.
    pub served: Vec<f64>,
    pub rate_plan: RatePlan,
    pub budgets: Vec<f64>,
    pub sampling_matrix: Vec<Vec<f64>>,
    pub dataset_sizes: Vec<usize>,
    pub pool_sizes: Vec<usize>,
    pub exit_loss: Vec<f64>,
    pub exit_accuracy: Option<Vec<f64>>,
    pub serving: Option<ServingOutcome>,
    pub noise_estimate: Option<NoiseEstimate>,
    pub error_report: ErrorReport,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct CellOutput {
    pub row: ResultRow,
    pub report: RunReport,
}

/// Rate plan and topology for a cell's serving specification. With a
/// split, the served rates are the split itself; the plan realized by the
/// derived budgets must agree with it.
pub fn serving_setup(base: &Topology, serving: &Serving) -> Result<(Topology, RatePlan, Vec<f64>)> {
    match serving {
        Serving::Split(split) => {
            let budgets = budgets_for_split(base, &split.shares)?;
            let topology = base.clone().with_budgets(&budgets)?;
            let plan = compute_rate_plan(&topology);
            for (got, want) in plan.lambda_exit_normalized.iter().zip(&split.shares) {
                if (got - want).abs() > SPLIT_TOL {
                    return Err(Error::InfeasibleSplit(format!(
                        "budgets realize {:?} instead of {}",
                        plan.lambda_exit_normalized, split.label
                    )));
                }
            }
            Ok((topology, plan, split.shares.clone()))
        }
        Serving::Budgets(b) => {
            let topology = base.clone().with_budgets(b)?;
            let plan = compute_rate_plan(&topology);
            if plan.lambda_exit.iter().sum::<f64>() <= 0.0 {
                return Err(Error::ZeroTraffic);
            }
            let served = plan.lambda_exit_normalized.clone();
            Ok((topology, plan, served))
        }
    }
}

/// Trains and evaluates one cell.
pub fn run_cell(config: &ExperimentConfig, base: &Topology, cell: &Cell) -> Result<CellOutput> {
    let (topology, plan, served) = serving_setup(base, &cell.serving)?;
    let sizes = cell.partition.allocate(&topology, config.total_samples)?;
    let topology = topology.with_dataset_sizes(&sizes)?;
    let p = build_sampling_matrix(&topology, cell.k)?;
    let pools = exit_pools(&topology, &p)?;
    let served_weights = ExitWeights::normalize(&served)?;
    let train = TrainConfig {
        seed: cell.seed,
        ..config.train.clone()
    };

    let mut report = RunReport {
        seed: cell.seed,
        partition: cell.partition.name(),
        split: cell.serving.label(),
        strategy: cell.strategy.name().to_string(),
        k: cell.k,
        weights: Vec::new(),
        served: served.clone(),
        budgets: topology.nodes().iter().map(|n| n.budget).collect(),
        rate_plan: plan.clone(),
        sampling_matrix: p.rows().to_vec(),
        dataset_sizes: sizes,
        pool_sizes: pools.sizes.clone(),
        exit_loss: Vec::new(),
        exit_accuracy: None,
        serving: None,
        noise_estimate: None,
        error_report: ErrorReport::default(),
        train: train.clone(),
    };

    let row = match config.task.kind {
        TaskKind::Mlp => {
            let task = generate_classification_data(
                &config.task.mlp,
                &topology,
                &cell.partition,
                config.total_samples,
                cell.seed,
            )?;
            let flops = config.task.flops.clone().unwrap_or_else(|| task.flops());
            let weights = cell.strategy.weights(&served, &pools, &flops)?;
            let outcome = fedtrain::run(&topology, &task, &weights, &p, &train)?;
            let w = &outcome.model;
            let arch = &task.arch;
            let e_max = topology.num_exits();
            let acc = (1..=e_max)
                .map(|e| exit_accuracy(arch, w, e, &task.test))
                .collect::<Result<Vec<_>>>()?;
            let loss: Vec<f64> = (1..=e_max).map(|e| arch.dataset_loss(w, e, &task.test)).collect();
            let weighted_acc = weighted_quality(&acc, &served)?;
            let weighted_loss = weighted_quality(&loss, &served)?;
            let sim = simulate_serving(&topology, &plan, arch, w, &task.test, config.evaluation.ranking)?;

            let tv = tv_distance(&weights, &served_weights)?;
            let proxy = gen_proxy(&weights, &flops, &pools)?;
            let (noise, b) = if config.evaluation.noise_probes > 0 {
                let est = theory::estimate_noise(&task, &pools, train.batch_size, config.evaluation.noise_probes, cell.seed);
                let alpha = alphas(&weights, &pools, train.server_lr);
                let sigma: Vec<PairValue> = alpha.iter().map(|a| PairValue { value: est.sigma, ..a.clone() }).collect();
                let moments = SecondMoment {
                    per_pair: alpha.iter().map(|a| PairValue { value: est.second_moment, ..a.clone() }).collect(),
                    max: est.second_moment,
                };
                let b = bound_b_from_parts(&sigma, 0.0, &moments, &alpha, &p, train.local_steps)?;
                report.error_report.second_moment_per_pair = moments.per_pair;
                report.error_report.second_moment_max = moments.max;
                (Some(est), Some(b))
            } else {
                (None, None)
            };
            report.error_report.tv = tv;
            report.error_report.b = b;
            report.error_report.estimated = true;
            report.error_report.gen_proxy = proxy;
            report.noise_estimate = noise;
            report.weights = weights.weights.clone();
            report.exit_loss = loss;
            report.exit_accuracy = Some(acc.clone());
            let system = sim.system_accuracy;
            report.serving = Some(sim);
            ResultRow {
                seed: cell.seed,
                partition: cell.partition.name(),
                split: cell.serving.label(),
                strategy: cell.strategy.name().to_string(),
                k: cell.k,
                exit_acc: acc.into_iter().map(Some).collect(),
                weighted_acc: Some(weighted_acc),
                system_acc_routed: Some(system),
                weighted_loss,
                tv,
                gen_proxy: proxy,
                opt_bound: None,
                empirical_opt_error: None,
            }
        }
        TaskKind::Quadratic => {
            let task = QuadraticTask::random(&topology, &config.task.quadratic, cell.seed)?;
            let e_max = topology.num_exits();
            let flops = config.task.flops.clone().unwrap_or_else(|| vec![1.0; e_max]);
            let weights = cell.strategy.weights(&served, &pools, &flops)?;
            let outcome = fedtrain::run(&topology, &task, &weights, &p, &train)?;
            let w = &outcome.model;
            let report_terms = quadratic_error_report(&task, &weights, &served_weights, &pools, &p, &train, w, config, cell.seed)?;
            let exit_loss: Vec<f64> = (1..=e_max)
                .map(|e| exit_pool_loss(&task, w, e, &pools))
                .collect();
            let weighted_loss = weighted_objective(&task, w, &served_weights, &pools)?;
            let proxy = gen_proxy(&weights, &flops, &pools)?;
            let row = ResultRow {
                seed: cell.seed,
                partition: cell.partition.name(),
                split: cell.serving.label(),
                strategy: cell.strategy.name().to_string(),
                k: cell.k,
                exit_acc: vec![None; e_max],
                weighted_acc: None,
                system_acc_routed: None,
                weighted_loss,
                tv: report_terms.tv,
                gen_proxy: proxy,
                opt_bound: report_terms.opt_bound.first().map(|v| v.value),
                empirical_opt_error: report_terms.empirical_opt_error.first().map(|v| v.value),
            };
            report.error_report = ErrorReport {
                gen_proxy: proxy,
                ..report_terms
            };
            report.weights = weights.weights.clone();
            report.exit_loss = exit_loss;
            row
        }
    };
    Ok(CellOutput { row, report })
}

/// Pool-weighted loss of one exit.
fn exit_pool_loss(task: &QuadraticTask, w: &[f64], exit: usize, pools: &ExitPools) -> f64 {
    pools.clients[exit - 1]
        .iter()
        .map(|&c| pools.share(c, exit) * task.client_loss(w, c, exit))
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn quadratic_error_report(
    task: &QuadraticTask,
    weights: &ExitWeights,
    served: &ExitWeights,
    pools: &ExitPools,
    p: &SamplingMatrix,
    train: &TrainConfig,
    w_final: &[f64],
    config: &ExperimentConfig,
    seed: u64,
) -> Result<ErrorReport> {
    let radius = train.projection_radius;
    let params = TheoryParams::from_quadratic(task, weights, pools, radius)?;
    let moments = theory::grad_second_moment(&params);
    let alpha = alphas(weights, pools, train.server_lr);
    let b = bound_b(&params, &alpha, p, train.local_steps)?;
    let opt = task.minimizers(weights, pools)?;
    let tv = tv_distance(weights, served)?;

    let opt_bound = match train.lr_schedule {
        LrSchedule::Theory { .. } => {
            let mut w1 = task.init_params(&mut rng::stream(train.seed, &[tag::INIT]));
            project(&mut w1, radius);
            let dist_sq: f64 = w1.iter().zip(&opt.w_star).map(|(a, b)| (a - b).powi(2)).sum();
            vec![HorizonValue {
                rounds: train.rounds,
                value: opt_error_bound(&params, b.total, train.rounds, train.local_steps, dist_sq, BoundDenominator::LocalSteps),
            }]
        }
        _ => Vec::new(),
    };
    let empirical = theory::empirical_opt_error(task, &[w_final.to_vec()], weights, pools)?;
    let bias = bias_bound(params.loss_cap, weights, served)?;
    let emp_bias = (config.evaluation.bias_probes > 0).then(|| {
        empirical_bias(task, weights, served, pools, params.loss_cap, radius, config.evaluation.bias_probes, seed)
    });
    Ok(ErrorReport {
        tv,
        heterogeneity: Some(params.heterogeneity),
        second_moment_per_pair: moments.per_pair,
        second_moment_max: moments.max,
        b: Some(b),
        estimated: false,
        opt_bound,
        empirical_opt_error: vec![HorizonValue {
            rounds: train.rounds,
            value: empirical,
        }],
        bias_bound: Some(bias),
        empirical_bias: emp_bias,
        gen_proxy: 0.0,
    })
}

/// Output of a sweep.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub reports: Vec<RunReport>,
    pub results_path: Option<PathBuf>,
}

fn sort_key(r: &ResultRow) -> (u64, &str, &str, &str) {
    (r.seed, &r.partition, &r.split, &r.strategy)
}

/// Runs every cell of the sweep and, when `out_dir` is given, writes
/// `results.csv` and the per-cell reports there.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    let plan = config.plan()?;
    let work = || -> Result<Vec<CellOutput>> {
        plan.cells
            .par_iter()
            .map(|cell| run_cell(config, &plan.topology, cell))
            .collect()
    };
    let mut outputs = match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .install(work)?,
        None => work()?,
    };
    outputs.sort_by(|a, b| {
        sort_key(&a.row)
            .cmp(&sort_key(&b.row))
            .then(a.row.k.total_cmp(&b.row.k))
    });
    let (rows, reports): (Vec<_>, Vec<_>) = outputs.into_iter().map(|o| (o.row, o.report)).unzip();

    let results_path = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("results.csv");
            write_results(&path, &rows, plan.topology.num_exits())?;
            if config.evaluation.write_reports {
                for (cell_report, row) in reports.iter().zip(&rows) {
                    let run_dir = dir.join("runs").join(row.slug());
                    fs::create_dir_all(&run_dir)?;
                    let json = serde_json::to_string_pretty(cell_report)?;
                    fs::write(run_dir.join("report.json"), json + "\n")?;
                }
            }
            Some(path)
        }
        None => None,
    };
    Ok(ExperimentOutput {
        rows,
        reports,
        results_path,
    })
}

/// Column names of `results.csv` for `num_exits` exits.
pub fn result_columns(num_exits: usize) -> Vec<String> {
    let mut cols: Vec<String> = ["seed", "partition", "split", "strategy", "k"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend((1..=num_exits).map(|e| format!("exit{e}_acc")));
    cols.extend(
        [
            "weighted_acc",
            "system_acc_routed",
            "weighted_loss",
            "tv",
            "gen_proxy",
            "opt_bound",
            "empirical_opt_error",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    cols
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_results(path: &Path, rows: &[ResultRow], num_exits: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(result_columns(num_exits))?;
    for r in rows {
        let mut rec = vec![
            r.seed.to_string(),
            r.partition.clone(),
            r.split.clone(),
            r.strategy.clone(),
            r.k.to_string(),
        ];
        rec.extend(r.exit_acc.iter().map(|a| opt(*a)));
        rec.push(opt(r.weighted_acc));
        rec.push(opt(r.system_acc_routed));
        rec.push(r.weighted_loss.to_string());
        rec.push(r.tv.to_string());
        rec.push(r.gen_proxy.to_string());
        rec.push(opt(r.opt_bound));
        rec.push(opt(r.empirical_opt_error));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean candidate-minus-baseline difference of a metric for one
/// `(partition, split, k)` group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub partition: String,
    pub split: String,
    pub k: String,
    pub seeds: usize,
    pub mean_delta: f64,
    /// Standard error of the mean over seeds; zero with a single seed.
    pub std_error: f64,
}

/// Pairs rows of `baseline` and `candidate` on `(partition, split, k, seed)`
/// and summarizes the differences of `metric` per `(partition, split, k)`.
pub fn compare(csv_path: &Path, baseline: &str, candidate: &str, metric: &str) -> Result<Vec<Comparison>> {
    let mut reader = csv::Reader::from_path(csv_path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingRows(format!("column `{name}` not in {}", csv_path.display())))
    };
    let (c_seed, c_part, c_split, c_strat, c_k, c_metric) =
        (col("seed")?, col("partition")?, col("split")?, col("strategy")?, col("k")?, col(metric)?);

    type Key = (String, String, String);
    let mut base: BTreeMap<(Key, String), f64> = BTreeMap::new();
    let mut cand: BTreeMap<(Key, String), f64> = BTreeMap::new();
    let mut order: Vec<Key> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let strategy = &rec[c_strat];
        let target = if strategy == baseline {
            &mut base
        } else if strategy == candidate {
            &mut cand
        } else {
            continue;
        };
        let key: Key = (rec[c_part].to_string(), rec[c_split].to_string(), rec[c_k].to_string());
        let value: f64 = rec[c_metric]
            .parse()
            .map_err(|_| Error::MissingRows(format!("`{metric}` is empty or invalid for {strategy}")))?;
        if !order.contains(&key) {
            order.push(key.clone());
        }
        target.insert((key, rec[c_seed].to_string()), value);
    }
    if base.is_empty() || cand.is_empty() {
        return Err(Error::MissingRows(format!("no rows for `{baseline}` or `{candidate}`")));
    }
    for k in base.keys().chain(cand.keys()) {
        if !base.contains_key(k) || !cand.contains_key(k) {
            return Err(Error::MissingRows(format!(
                "{} {} k={} seed {} lacks a partner row",
                k.0 .0, k.0 .1, k.0 .2, k.1
            )));
        }
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let deltas: Vec<f64> = cand
                .iter()
                .filter(|((k, _), _)| *k == key)
                .map(|(k, v)| v - base[k])
                .collect();
            let n = deltas.len() as f64;
            let mean = deltas.iter().sum::<f64>() / n;
            let std_error = if deltas.len() > 1 {
                let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            Comparison {
                partition: key.0,
                split: key.1,
                k: key.2,
                seeds: deltas.len(),
                mean_delta: mean,
                std_error,
            }
        })
        .collect())
}
