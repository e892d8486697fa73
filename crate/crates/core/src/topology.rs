//! Cooperative inference tree, transmission rates and per-exit serving rates.
//!
//! Requests arrive at nodes with rate `arrival_rate`; a node serves part of
//! its inflow with its own exit and forwards the rest to its parent, capped
//! by its transmission `budget`. When deeper exits are more accurate every
//! node forwards as much as its budget allows, which pins the flows to
//!
//! ```text
//! transmit_i = min(budget_i, arrival_i + sum_{j child of i} transmit_j)
//! ```
//!
//! with the root forwarding nothing. [`compute_rate_plan`] evaluates this in
//! one post-order pass; [`brute_force_rate_plan`] reaches the same flows by
//! Jacobi fixed-point iteration and serves as an independent check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One node of the inference tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: u32,
    #[serde(default)]
    pub parent: Option<u32>,
    /// Exit deployed for inference, 1-based.
    pub exit: usize,
    #[serde(default)]
    pub arrival_rate: f64,
    #[serde(default)]
    pub budget: f64,
    #[serde(default)]
    pub dataset_size: usize,
}

impl NodeSpec {
    pub fn new(id: u32, parent: Option<u32>, exit: usize) -> Self {
        Self {
            id,
            parent,
            exit,
            arrival_rate: 0.0,
            budget: 0.0,
            dataset_size: 0,
        }
    }
}

/// A validated rooted tree. Nodes are kept sorted by ascending id, and the
/// position of a node in that order is its client index everywhere else in
/// the crate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Topology {
    nodes: Vec<NodeSpec>,
    num_exits: usize,
    #[serde(skip)]
    parent: Vec<Option<usize>>,
    #[serde(skip)]
    children: Vec<Vec<usize>>,
    #[serde(skip)]
    root: usize,
    /// Children before parents.
    #[serde(skip)]
    post_order: Vec<usize>,
}

struct Links {
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    root: usize,
    post_order: Vec<usize>,
}

/// Checks the structural assumptions on a set of nodes: one root, a proper
/// tree, exits strictly decreasing from parent to child and every exit in
/// `1..=num_exits` deployed somewhere.
pub fn validate(nodes: &[NodeSpec], num_exits: usize) -> Result<()> {
    let mut sorted = nodes.to_vec();
    sorted.sort_by_key(|n| n.id);
    link(&sorted, num_exits).map(|_| ())
}

fn link(nodes: &[NodeSpec], num_exits: usize) -> Result<Links> {
    if nodes.is_empty() {
        return Err(Error::InvalidTopology("no nodes".into()));
    }
    if num_exits == 0 {
        return Err(Error::InvalidTopology("number of exits must be at least 1".into()));
    }
    let n = nodes.len();
    let index_of = |id: u32| nodes.binary_search_by_key(&id, |n| n.id).ok();
    for w in nodes.windows(2) {
        if w[0].id == w[1].id {
            return Err(Error::InvalidTopology(format!("duplicate node id {}", w[0].id)));
        }
    }

    let mut parent = vec![None; n];
    for (i, node) in nodes.iter().enumerate() {
        if !(node.arrival_rate >= 0.0) || !(node.budget >= 0.0) {
            return Err(Error::InvalidTopology(format!(
                "node {} has a negative or NaN rate",
                node.id
            )));
        }
        if node.exit == 0 || node.exit > num_exits {
            return Err(Error::InvalidTopology(format!(
                "node {} has exit {} outside 1..={num_exits}",
                node.id, node.exit
            )));
        }
        if let Some(pid) = node.parent {
            let p = index_of(pid).ok_or_else(|| {
                Error::InvalidTopology(format!("node {} has unknown parent {pid}", node.id))
            })?;
            parent[i] = Some(p);
        }
    }

    // Walking up from any node must terminate within n steps.
    for (start, node) in nodes.iter().enumerate() {
        let mut cur = start;
        let mut steps = 0;
        while let Some(p) = parent[cur] {
            cur = p;
            steps += 1;
            if steps > n {
                return Err(Error::Cycle(node.id));
            }
        }
    }

    let roots: Vec<usize> = (0..n).filter(|&i| parent[i].is_none()).collect();
    if roots.len() != 1 {
        return Err(Error::MultipleRoots(roots.len()));
    }
    let root = roots[0];

    for (i, node) in nodes.iter().enumerate() {
        if let Some(p) = parent[i] {
            if node.exit >= nodes[p].exit {
                return Err(Error::ExitOrderViolation {
                    child: node.id,
                    child_exit: node.exit,
                    parent: nodes[p].id,
                    parent_exit: nodes[p].exit,
                });
            }
        }
    }
    for e in 1..=num_exits {
        if !nodes.iter().any(|n| n.exit == e) {
            return Err(Error::MissingExit(e));
        }
    }

    let mut children = vec![Vec::new(); n];
    for (i, p) in parent.iter().enumerate() {
        if let Some(p) = *p {
            children[p].push(i);
        }
    }
    let mut pre = Vec::with_capacity(n);
    let mut stack = vec![root];
    while let Some(i) = stack.pop() {
        pre.push(i);
        stack.extend(children[i].iter().rev());
    }
    pre.reverse();

    Ok(Links {
        parent,
        children,
        root,
        post_order: pre,
    })
}

impl Topology {
    pub fn new(mut nodes: Vec<NodeSpec>, num_exits: usize) -> Result<Self> {
        nodes.sort_by_key(|n| n.id);
        let links = link(&nodes, num_exits)?;
        Ok(Self {
            nodes,
            num_exits,
            parent: links.parent,
            children: links.children,
            root: links.root,
            post_order: links.post_order,
        })
    }

    /// Number of exits is the root's exit.
    pub fn from_nodes(nodes: Vec<NodeSpec>) -> Result<Self> {
        let e = nodes.iter().map(|n| n.exit).max().unwrap_or(0);
        Self::new(nodes, e)
    }

    /// The seven-node cloud / edge / device tree: cloud 1 (exit 3), edges 2
    /// and 3 (exit 2), devices 4..7 (exit 1). Requests arrive only at the
    /// devices, one unit each; all budgets are zero.
    pub fn cloud_edge_device() -> Self {
        let mut nodes = vec![
            NodeSpec::new(1, None, 3),
            NodeSpec::new(2, Some(1), 2),
            NodeSpec::new(3, Some(1), 2),
            NodeSpec::new(4, Some(2), 1),
            NodeSpec::new(5, Some(2), 1),
            NodeSpec::new(6, Some(3), 1),
            NodeSpec::new(7, Some(3), 1),
        ];
        for n in nodes.iter_mut().skip(3) {
            n.arrival_rate = 1.0;
        }
        Self::new(nodes, 3).expect("static topology is valid")
    }

    /// A path `leaf -> ... -> root` with exits `1..=len` from leaf upward.
    /// Arrivals and budgets are listed leaf first; the root has no budget.
    pub fn chain(arrivals: &[f64], budgets: &[f64]) -> Result<Self> {
        let len = arrivals.len();
        if budgets.len() + 1 != len {
            return Err(Error::InvalidTopology(
                "a chain needs one budget per non-root node".into(),
            ));
        }
        let nodes = (0..len)
            .map(|k| {
                // Leaf gets the largest id so ids ascend from the root.
                let id = (len - k) as u32;
                let parent = if k + 1 < len { Some(id - 1) } else { None };
                let mut n = NodeSpec::new(id, parent, k + 1);
                n.arrival_rate = arrivals[k];
                n.budget = budgets.get(k).copied().unwrap_or(0.0);
                n
            })
            .collect();
        Self::new(nodes, len)
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_exits(&self) -> usize {
        self.num_exits
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parent[i]
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn post_order(&self) -> &[usize] {
        &self.post_order
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.children[i].is_empty()
    }

    pub fn depth(&self, mut i: usize) -> usize {
        let mut d = 0;
        while let Some(p) = self.parent[i] {
            i = p;
            d += 1;
        }
        d
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok()
    }

    /// Client indices deploying `exit`.
    pub fn nodes_with_exit(&self, exit: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.nodes[i].exit == exit).collect()
    }

    /// True when every node's exit equals `num_exits - depth`.
    pub fn is_layered(&self) -> bool {
        (0..self.len()).all(|i| self.nodes[i].exit + self.depth(i) == self.num_exits)
    }

    pub fn total_arrival(&self) -> f64 {
        self.nodes.iter().map(|n| n.arrival_rate).sum()
    }

    pub fn dataset_sizes(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.dataset_size).collect()
    }

    /// Replaces per-node budgets (client index order).
    pub fn with_budgets(mut self, budgets: &[f64]) -> Result<Self> {
        if budgets.len() != self.len() {
            return Err(Error::InvalidTopology("one budget per node required".into()));
        }
        for (n, &b) in self.nodes.iter_mut().zip(budgets) {
            if !(b >= 0.0) {
                return Err(Error::InvalidTopology(format!("node {} budget {b} < 0", n.id)));
            }
            n.budget = b;
        }
        Ok(self)
    }

    pub fn with_dataset_sizes(mut self, sizes: &[usize]) -> Result<Self> {
        if sizes.len() != self.len() {
            return Err(Error::InvalidTopology("one dataset size per node required".into()));
        }
        for (n, &s) in self.nodes.iter_mut().zip(sizes) {
            n.dataset_size = s;
        }
        Ok(self)
    }

    pub fn with_arrivals(mut self, arrivals: &[f64]) -> Result<Self> {
        if arrivals.len() != self.len() {
            return Err(Error::InvalidTopology("one arrival rate per node required".into()));
        }
        for (n, &a) in self.nodes.iter_mut().zip(arrivals) {
            if !(a >= 0.0) {
                return Err(Error::InvalidTopology(format!("node {} arrival {a} < 0", n.id)));
            }
            n.arrival_rate = a;
        }
        Ok(self)
    }
}

impl<'de> Deserialize<'de> for Topology {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            nodes: Vec<NodeSpec>,
            num_exits: Option<usize>,
        }
        let raw = Raw::deserialize(d)?;
        let t = match raw.num_exits {
            Some(e) => Topology::new(raw.nodes, e),
            None => Topology::from_nodes(raw.nodes),
        };
        t.map_err(serde::de::Error::custom)
    }
}

/// Flows induced by the saturating routing policy. Per-node vectors are in
/// client index order, per-exit vectors are indexed by `exit - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePlan {
    pub transmit: Vec<f64>,
    pub serve: Vec<f64>,
    pub fraction: Vec<f64>,
    pub lambda_exit: Vec<f64>,
    pub lambda_exit_normalized: Vec<f64>,
}

impl RatePlan {
    fn from_transmit(topology: &Topology, transmit: Vec<f64>) -> Self {
        let n = topology.len();
        let mut serve = vec![0.0; n];
        let mut fraction = vec![1.0; n];
        let mut lambda_exit = vec![0.0; topology.num_exits()];
        for i in 0..n {
            let inflow = inflow(topology, &transmit, i);
            serve[i] = inflow - transmit[i];
            if inflow > 0.0 {
                fraction[i] = serve[i] / inflow;
            }
            lambda_exit[topology.nodes[i].exit - 1] += serve[i];
        }
        let total: f64 = lambda_exit.iter().sum();
        let lambda_exit_normalized = if total > 0.0 {
            lambda_exit.iter().map(|l| l / total).collect()
        } else {
            vec![0.0; lambda_exit.len()]
        };
        Self {
            transmit,
            serve,
            fraction,
            lambda_exit,
            lambda_exit_normalized,
        }
    }

    /// Inflow (local arrivals plus children's forwarded traffic) per node.
    pub fn inflow(&self, topology: &Topology) -> Vec<f64> {
        (0..topology.len())
            .map(|i| inflow(topology, &self.transmit, i))
            .collect()
    }
}

fn inflow(topology: &Topology, transmit: &[f64], i: usize) -> f64 {
    topology.nodes[i].arrival_rate
        + topology.children[i].iter().map(|&j| transmit[j]).sum::<f64>()
}

/// Saturating rate plan by a single post-order pass.
pub fn compute_rate_plan(topology: &Topology) -> RatePlan {
    let mut transmit = vec![0.0; topology.len()];
    for &i in topology.post_order() {
        if i == topology.root {
            continue;
        }
        transmit[i] = topology.nodes[i].budget.min(inflow(topology, &transmit, i));
    }
    RatePlan::from_transmit(topology, transmit)
}

const FIXED_POINT_TOL: f64 = 1e-13;
const FIXED_POINT_MAX_ITERS: usize = 100_000;

/// Same flows as [`compute_rate_plan`], reached by repeatedly letting every
/// node forward as much as its budget allows given the previous iterate.
pub fn brute_force_rate_plan(topology: &Topology) -> Result<RatePlan> {
    let n = topology.len();
    let mut transmit = vec![0.0; n];
    for _ in 0..FIXED_POINT_MAX_ITERS {
        let next: Vec<f64> = (0..n)
            .map(|i| {
                if topology.parent[i].is_none() {
                    0.0
                } else {
                    topology.nodes[i].budget.min(inflow(topology, &transmit, i))
                }
            })
            .collect();
        let change = next
            .iter()
            .zip(&transmit)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        transmit = next;
        if change < FIXED_POINT_TOL {
            return Ok(RatePlan::from_transmit(topology, transmit));
        }
    }
    Err(Error::NonConvergence(FIXED_POINT_MAX_ITERS))
}

/// Per-node budgets realizing a target per-exit serving split on a layered
/// tree whose requests all arrive at leaves. Within a layer the served
/// traffic is shared equally; each node forwards exactly what it does not
/// serve.
pub fn budgets_for_split(topology: &Topology, split: &[f64]) -> Result<Vec<f64>> {
    let e_max = topology.num_exits();
    if split.len() != e_max {
        return Err(Error::InfeasibleSplit(format!(
            "split has {} entries for {e_max} exits",
            split.len()
        )));
    }
    if split.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::InfeasibleSplit("negative share".into()));
    }
    let sum: f64 = split.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InfeasibleSplit(format!("shares sum to {sum}, not 1")));
    }
    if !topology.is_layered() {
        return Err(Error::InfeasibleSplit("topology is not layered by depth".into()));
    }
    for (i, node) in topology.nodes.iter().enumerate() {
        if !topology.is_leaf(i) && node.arrival_rate != 0.0 {
            return Err(Error::InfeasibleSplit(format!(
                "internal node {} has local arrivals",
                node.id
            )));
        }
    }

    let total = topology.total_arrival();
    let tol = 1e-9 * total.max(1.0);
    let layer_sizes: Vec<usize> = (1..=e_max)
        .map(|e| topology.nodes_with_exit(e).len())
        .collect();
    let mut budgets = vec![0.0; topology.len()];
    for &i in topology.post_order() {
        let e = topology.nodes[i].exit;
        let target = split[e - 1] * total / layer_sizes[e - 1] as f64;
        let inflow = inflow(topology, &budgets, i);
        if i == topology.root {
            if (inflow - target).abs() > tol {
                return Err(Error::InfeasibleSplit(format!(
                    "root receives {inflow} but should serve {target}"
                )));
            }
            continue;
        }
        let forward = inflow - target;
        if forward < -tol {
            return Err(Error::InfeasibleSplit(format!(
                "node {} receives {inflow} but should serve {target}",
                topology.nodes[i].id
            )));
        }
        budgets[i] = forward.max(0.0);
    }
    Ok(budgets)
}

/// P1 objective `sum_i loss(exit_i) * serve_i` of a plan.
pub fn p1_objective(topology: &Topology, plan: &RatePlan, exit_losses: &[f64]) -> f64 {
    topology
        .nodes
        .iter()
        .zip(&plan.serve)
        .map(|(n, s)| exit_losses[n.exit - 1] * s)
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct P1Solution {
    pub fractions: Vec<f64>,
    pub objective: f64,
}

/// Exhaustive search over serving fractions on a grid of width `step`,
/// subject to every node's transmission staying within its budget. The
/// root always serves everything it receives. Only meant for tiny trees.
pub fn grid_search_p1(topology: &Topology, exit_losses: &[f64], step: f64) -> Result<P1Solution> {
    if topology.len() > 4 {
        return Err(Error::InvalidConfig("grid search supports at most 4 nodes".into()));
    }
    if !(step > 0.0 && step <= 0.2) {
        return Err(Error::InvalidConfig(format!("grid step {step} outside (0, 0.2]")));
    }
    if exit_losses.len() != topology.num_exits() {
        return Err(Error::InvalidConfig("one loss per exit required".into()));
    }
    let levels = (1.0 / step).round() as usize;
    let grid: Vec<f64> = (0..=levels).map(|k| (k as f64 * step).min(1.0)).collect();
    let free: Vec<usize> = (0..topology.len()).filter(|&i| i != topology.root).collect();

    let mut best: Option<P1Solution> = None;
    let mut counter = vec![0usize; free.len()];
    let mut fractions = vec![1.0; topology.len()];
    loop {
        for (slot, &i) in free.iter().enumerate() {
            fractions[i] = grid[counter[slot]];
        }
        if let Some(obj) = evaluate_fractions(topology, &fractions, exit_losses) {
            if best.as_ref().is_none_or(|b| obj < b.objective) {
                best = Some(P1Solution {
                    fractions: fractions.clone(),
                    objective: obj,
                });
            }
        }
        // Odometer increment.
        let mut slot = 0;
        loop {
            if slot == counter.len() {
                return best.ok_or_else(|| Error::InvalidConfig("no feasible grid point".into()));
            }
            counter[slot] += 1;
            if counter[slot] < grid.len() {
                break;
            }
            counter[slot] = 0;
            slot += 1;
        }
    }
}

fn evaluate_fractions(topology: &Topology, fractions: &[f64], exit_losses: &[f64]) -> Option<f64> {
    let mut transmit = vec![0.0; topology.len()];
    let mut objective = 0.0;
    for &i in topology.post_order() {
        let inflow = inflow(topology, &transmit, i);
        let t = inflow * (1.0 - fractions[i]);
        if t > topology.nodes[i].budget + 1e-12 {
            return None;
        }
        transmit[i] = t;
        objective += exit_losses[topology.nodes[i].exit - 1] * inflow * fractions[i];
    }
    Some(objective)
}
