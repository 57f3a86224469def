//! Second-order gradient boosting on the logistic loss with exact greedy,
//! depth-limited regression trees.
//!
//! A split sends `x < threshold` left. Candidate thresholds are midpoints of
//! consecutive distinct values in the node. Equal gains resolve to the lowest
//! feature index, then the lowest threshold.

use serde::{Deserialize, Serialize};

use crate::trainer::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub eta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self { rounds: 200, max_depth: 4, eta: 0.1, lambda: 1.0, gamma: 0.0, min_child_weight: 1.0 }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(format!("eta must be positive, got {}", self.eta));
        }
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma), ("min_child_weight", self.min_child_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, gain: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

/// Nodes in pre-order; the root is `nodes[0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtTree {
    pub nodes: Vec<TreeNode>,
}

impl GbdtTree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split { feature, threshold, left, right, .. } => {
                    at = if row[feature] < threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], at: usize) -> usize {
            match nodes[at] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn splits(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.nodes.iter().filter_map(|n| match *n {
            TreeNode::Split { feature, gain, .. } => Some((feature, gain)),
            TreeNode::Leaf { .. } => None,
        })
    }
}

/// Split threshold between consecutive distinct values `a < b`; always
/// satisfies `a < t <= b`.
pub fn midpoint(a: f64, b: f64) -> f64 {
    let m = 0.5 * a + 0.5 * b;
    if m > a { m } else { b }
}

/// Structure score gain of splitting `(g, h)` into left and right parts.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr)) - gamma
}

pub fn leaf_value(g: f64, h: f64, eta: f64, lambda: f64) -> f64 {
    if h + lambda > 0.0 { -eta * g / (h + lambda) } else { 0.0 }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Column-major copy of a feature matrix with every column's row order
/// sorted by value (ties by row index). Built once and shared by all trees.
#[derive(Debug, Clone)]
pub struct ColumnData {
    pub n_rows: usize,
    columns: Vec<Vec<f64>>,
    sorted: Vec<Vec<u32>>,
}

impl ColumnData {
    pub fn from_rows(rows: &ndarray::Array2<f64>) -> Self {
        let n_rows = rows.nrows();
        let columns: Vec<Vec<f64>> = rows.columns().into_iter().map(|c| c.to_vec()).collect();
        let sorted = columns
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..n_rows as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Self { n_rows, columns, sorted }
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    /// Per-feature sorted order of every row, as used for the root node.
    pub fn root_order(&self) -> &[Vec<u32>] {
        &self.sorted
    }

    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.columns[feature][row]
    }
}

/// Best split of one node, scanning each feature's rows in sorted order.
/// `sorted[f]` lists the node's rows ordered by feature `f`. Returns `None`
/// when no candidate has positive gain with both children meeting
/// `min_child_weight`.
pub fn find_best_split(
    data: &ColumnData,
    sorted: &[Vec<u32>],
    grad: &[f64],
    hess: &[f64],
    params: &GbdtParams,
) -> Option<SplitCandidate> {
    let mut rows = sorted.first()?.clone();
    rows.sort_unstable();
    best_split(data, &rows, sorted, grad, hess, params)
}

/// Sums over `rows` in ascending row order, so totals do not depend on
/// column order.
fn node_totals(rows: &[u32], grad: &[f64], hess: &[f64]) -> (f64, f64) {
    rows.iter().fold((0.0, 0.0), |(g, h), &r| (g + grad[r as usize], h + hess[r as usize]))
}

fn best_split(
    data: &ColumnData,
    rows: &[u32],
    sorted: &[Vec<u32>],
    grad: &[f64],
    hess: &[f64],
    params: &GbdtParams,
) -> Option<SplitCandidate> {
    let (g_total, h_total) = node_totals(rows, grad, hess);
    let mut best: Option<SplitCandidate> = None;
    for (feature, order) in sorted.iter().enumerate() {
        let col = &data.columns[feature];
        let (mut gl, mut hl) = (0.0, 0.0);
        for pair in order.windows(2) {
            let (a, b) = (pair[0] as usize, pair[1] as usize);
            gl += grad[a];
            hl += hess[a];
            if col[b] <= col[a] {
                continue;
            }
            let (gr, hr) = (g_total - gl, h_total - hl);
            if hl < params.min_child_weight || hr < params.min_child_weight {
                continue;
            }
            if hl + params.lambda <= 0.0 || hr + params.lambda <= 0.0 {
                continue;
            }
            let gain = split_gain(gl, hl, gr, hr, params.lambda, params.gamma);
            if gain > 0.0 && best.is_none_or(|b| gain > b.gain) {
                best = Some(SplitCandidate { feature, threshold: midpoint(col[a], col[b]), gain });
            }
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn build_node(
    data: &ColumnData,
    rows: Vec<u32>,
    sorted: Vec<Vec<u32>>,
    grad: &[f64],
    hess: &[f64],
    params: &GbdtParams,
    depth: usize,
    nodes: &mut Vec<TreeNode>,
    goes_left: &mut [bool],
) -> usize {
    let at = nodes.len();
    let split = if depth < params.max_depth { best_split(data, &rows, &sorted, grad, hess, params) } else { None };
    let Some(split) = split else {
        let (g, h) = node_totals(&rows, grad, hess);
        nodes.push(TreeNode::Leaf { value: leaf_value(g, h, params.eta, params.lambda) });
        return at;
    };
    nodes.push(TreeNode::Leaf { value: 0.0 });
    let col = &data.columns[split.feature];
    for &r in &rows {
        goes_left[r as usize] = col[r as usize] < split.threshold;
    }
    let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows.into_iter().partition(|&r| goes_left[r as usize]);
    let (left_sorted, right_sorted): (Vec<Vec<u32>>, Vec<Vec<u32>>) = sorted
        .into_iter()
        .map(|order| order.into_iter().partition(|&r| goes_left[r as usize]))
        .unzip();
    let left = build_node(data, left_rows, left_sorted, grad, hess, params, depth + 1, nodes, goes_left);
    let right = build_node(data, right_rows, right_sorted, grad, hess, params, depth + 1, nodes, goes_left);
    nodes[at] = TreeNode::Split { feature: split.feature, threshold: split.threshold, gain: split.gain, left, right };
    at
}

/// Fits one regression tree to gradient statistics over all rows of `data`.
pub fn fit_tree(data: &ColumnData, grad: &[f64], hess: &[f64], params: &GbdtParams) -> GbdtTree {
    let mut nodes = Vec::new();
    let mut goes_left = vec![false; data.n_rows];
    let rows = (0..data.n_rows as u32).collect();
    build_node(data, rows, data.sorted.clone(), grad, hess, params, 0, &mut nodes, &mut goes_left);
    GbdtTree { nodes }
}

/// Mean logistic loss of margins against 0/1 targets.
pub fn logistic_loss(margins: &[f64], targets: &[u8]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(targets)
        .map(|(&z, &y)| z.max(0.0) - z * f64::from(y) + (-z.abs()).exp().ln_1p())
        .sum();
    total / margins.len().max(1) as f64
}

/// Boosted forest and the training loss before the first and after every round.
#[derive(Debug, Clone)]
pub struct BoostResult {
    pub trees: Vec<GbdtTree>,
    pub loss_history: Vec<f64>,
}

/// Boosts `params.rounds` trees from `base_score` on the logistic loss.
/// Targets must contain both classes; the caller checks.
pub fn fit_gbdt(data: &ColumnData, targets: &[u8], params: &GbdtParams, base_score: f64) -> BoostResult {
    assert_eq!(targets.len(), data.n_rows);
    let n = data.n_rows;
    let mut margins = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees = Vec::with_capacity(params.rounds);
    let mut loss_history = vec![logistic_loss(&margins, targets)];
    let mut row = vec![0.0; data.n_features()];
    for _ in 0..params.rounds {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            grad[i] = p - f64::from(targets[i]);
            hess[i] = p * (1.0 - p);
        }
        let tree = fit_tree(data, &grad, &hess, params);
        for (i, m) in margins.iter_mut().enumerate() {
            for (f, v) in row.iter_mut().enumerate() {
                *v = data.columns[f][i];
            }
            *m += tree.predict(&row);
        }
        loss_history.push(logistic_loss(&margins, targets));
        trees.push(tree);
    }
    BoostResult { trees, loss_history }
}

/// `base_score + Σ tree outputs` for one row.
pub fn forest_margin(trees: &[GbdtTree], base_score: f64, row: &[f64]) -> f64 {
    trees.iter().fold(base_score, |acc, t| acc + t.predict(row))
}
