//! Built-in estimators: logistic regression, k-nearest neighbors, Gaussian
//! naive Bayes, and gradient-boosted trees for binary tasks; ridge,
//! k-nearest neighbors, and gradient-boosted trees for regression.
//!
//! Every model is trained directly here (full-batch gradient descent,
//! closed-form normal equations, presorted-feature tree growing) so fits are
//! deterministic under a fixed seed and serialize cleanly. The registry is
//! name-keyed and open: adding a family means adding a `fit` arm and a
//! default search space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tuner::{Domain, Params, SearchSpace};
use crate::problems::TaskType;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("unknown estimator {name:?} for task {task:?}")]
    UnknownEstimator { name: String, task: TaskType },
    #[error("singular fit: {detail}")]
    SingularFit { detail: String },
}

/// Estimator families available for a task, in deterministic order.
pub fn registry(task: TaskType) -> Vec<&'static str> {
    match task {
        TaskType::Binary => vec!["gbdt", "gnb", "knn", "logistic"],
        TaskType::Regression => vec!["gbdt", "knn", "ridge"],
    }
}

/// Default hyperparameter domains for one family. The paper-cited models ship
/// without published domains, so these are editable defaults, not gospel.
pub fn default_space(name: &str, task: TaskType) -> Result<SearchSpace, EstimatorError> {
    let space = match name {
        "logistic" => SearchSpace::new()
            .with("lr", Domain::Continuous { lo: 1e-3, hi: 1.0, log: true })
            .with("l2", Domain::Continuous { lo: 1e-6, hi: 10.0, log: true })
            .with("epochs", Domain::Integer { lo: 50, hi: 300 }),
        "knn" => SearchSpace::new()
            .with("k", Domain::Integer { lo: 1, hi: 25 })
            .with(
                "weighting",
                Domain::Categorical { choices: vec!["uniform".into(), "distance".into()] },
            ),
        "gnb" => SearchSpace::new().with(
            "var_smoothing",
            Domain::Continuous { lo: 1e-12, hi: 1e-3, log: true },
        ),
        "gbdt" => SearchSpace::new()
            .with("rounds", Domain::Integer { lo: 20, hi: 200 })
            .with("lr", Domain::Continuous { lo: 0.01, hi: 0.5, log: true })
            .with("depth", Domain::Integer { lo: 2, hi: 6 })
            .with("min_leaf", Domain::Integer { lo: 1, hi: 20 }),
        "ridge" => SearchSpace::new().with(
            "alpha",
            Domain::Continuous { lo: 1e-6, hi: 10.0, log: true },
        ),
        _ => return Err(EstimatorError::UnknownEstimator { name: name.to_owned(), task }),
    };
    if !registry(task).contains(&name) {
        return Err(EstimatorError::UnknownEstimator { name: name.to_owned(), task });
    }
    Ok(space)
}

fn f_param(params: &Params, key: &str, default: f64) -> f64 {
    params.get(key).and_then(|v| v.as_f64()).unwrap_or(default)
}

fn i_param(params: &Params, key: &str, default: i64) -> i64 {
    params.get(key).and_then(|v| v.as_i64()).unwrap_or(default)
}

fn s_param<'a>(params: &'a Params, key: &str, default: &'a str) -> &'a str {
    params.get(key).and_then(|v| v.as_str()).unwrap_or(default)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    Distance,
}

impl Weighting {
    fn parse(s: &str) -> Self {
        if s == "distance" {
            Weighting::Distance
        } else {
            Weighting::Uniform
        }
    }

    fn weight(self, distance: f64) -> f64 {
        match self {
            Weighting::Uniform => 1.0,
            Weighting::Distance => 1.0 / (distance + 1e-12),
        }
    }
}

/// One node of a fitted regression tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// A regression tree stored as a flat node arena (root at index 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    fn predict_row(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, threshold, left, right } => {
                    at = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for node in &mut self.nodes {
            if let TreeNode::Leaf { value } = node {
                *value *= factor;
            }
        }
    }
}

/// Grows one tree by recursive best-first variance-reduction splitting.
///
/// Feature orderings are computed once up front; each split partitions the
/// per-feature sorted lists stably, so no re-sorting happens below the root
/// and the result is independent of thread count or allocation order.
struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    /// Split-criterion targets (residuals / negative gradients).
    targets: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
}

impl<'a> TreeBuilder<'a> {
    fn build(&self, leaf_value: &dyn Fn(&[usize]) -> f64) -> Tree {
        let n = self.x.len();
        let n_features = self.x.first().map(|r| r.len()).unwrap_or(0);
        let mut sorted: Vec<Vec<usize>> = Vec::with_capacity(n_features);
        for f in 0..n_features {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            sorted.push(order);
        }
        let mut tree = Tree { nodes: Vec::new() };
        self.grow(&mut tree, sorted, 0, leaf_value);
        tree
    }

    fn grow(
        &self,
        tree: &mut Tree,
        cols: Vec<Vec<usize>>,
        depth: usize,
        leaf_value: &dyn Fn(&[usize]) -> f64,
    ) -> usize {
        let rows = &cols[0];
        let n = rows.len();
        let make_leaf = |tree: &mut Tree| {
            tree.nodes.push(TreeNode::Leaf { value: leaf_value(rows) });
            tree.nodes.len() - 1
        };
        if depth >= self.max_depth || n < 2 * self.min_leaf {
            return make_leaf(tree);
        }

        let total: f64 = rows.iter().map(|&r| self.targets[r]).sum();
        let parent_score = total * total / n as f64;
        let mut best: Option<(f64, usize, f64, usize)> = None; // (gain, feature, threshold, left count)
        for (f, order) in cols.iter().enumerate() {
            let mut left_sum = 0.0;
            for p in 1..n {
                left_sum += self.targets[order[p - 1]];
                let (prev, here) = (self.x[order[p - 1]][f], self.x[order[p]][f]);
                if prev == here {
                    continue; // can't separate equal values
                }
                if p < self.min_leaf || n - p < self.min_leaf {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / p as f64
                    + right_sum * right_sum / (n - p) as f64
                    - parent_score;
                if gain > 1e-12 && best.as_ref().map_or(true, |(g, ..)| gain > *g) {
                    best = Some((gain, f, (prev + here) / 2.0, p));
                }
            }
        }
        let Some((_, feature, threshold, _)) = best else {
            return make_leaf(tree);
        };

        let mut goes_left = vec![false; self.x.len()];
        for &r in rows {
            goes_left[r] = self.x[r][feature] <= threshold;
        }
        let mut left_cols = Vec::with_capacity(cols.len());
        let mut right_cols = Vec::with_capacity(cols.len());
        for order in &cols {
            let (l, r): (Vec<usize>, Vec<usize>) =
                order.iter().partition(|&&i| goes_left[i]);
            left_cols.push(l);
            right_cols.push(r);
        }
        drop(cols);

        let at = tree.nodes.len();
        tree.nodes.push(TreeNode::Split { feature, threshold, left: 0, right: 0 });
        let left = self.grow(tree, left_cols, depth + 1, leaf_value);
        let right = self.grow(tree, right_cols, depth + 1, leaf_value);
        if let TreeNode::Split { left: l, right: r, .. } = &mut tree.nodes[at] {
            *l = left;
            *r = right;
        }
        at
    }
}

/// A trained model, serializable as part of the pipeline artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum FittedEstimator {
    Logistic {
        classes: [f64; 2],
        weights: Vec<f64>,
        bias: f64,
    },
    KnnClassifier {
        classes: [f64; 2],
        x: Vec<Vec<f64>>,
        y01: Vec<u8>,
        k: usize,
        weighting: Weighting,
    },
    Gnb {
        classes: [f64; 2],
        log_priors: [f64; 2],
        /// Per class, per feature.
        means: [Vec<f64>; 2],
        vars: [Vec<f64>; 2],
    },
    GbdtClassifier {
        classes: [f64; 2],
        base_score: f64,
        trees: Vec<Tree>,
    },
    Ridge {
        weights: Vec<f64>,
        bias: f64,
    },
    KnnRegressor {
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        k: usize,
        weighting: Weighting,
    },
    GbdtRegressor {
        base_score: f64,
        trees: Vec<Tree>,
    },
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Two distinct class values, sorted ascending, plus y mapped to {0,1}.
fn binary_classes(y: &[f64]) -> Result<([f64; 2], Vec<u8>), EstimatorError> {
    let mut classes: Vec<f64> = y.to_vec();
    classes.sort_by(f64::total_cmp);
    classes.dedup();
    if classes.len() != 2 {
        return Err(EstimatorError::SingularFit {
            detail: format!(
                "binary estimator requires exactly 2 classes in training labels, found {}",
                classes.len()
            ),
        });
    }
    let y01 = y.iter().map(|&v| u8::from(v == classes[1])).collect();
    Ok(([classes[0], classes[1]], y01))
}

fn require_rows(x: &[Vec<f64>]) -> Result<(), EstimatorError> {
    if x.is_empty() {
        return Err(EstimatorError::SingularFit { detail: "no training rows".into() });
    }
    Ok(())
}

/// Regularized mean cross-entropy of a logistic model; the l2 term covers the
/// weights only, never the bias.
pub fn logistic_loss(weights: &[f64], bias: f64, x: &[Vec<f64>], y01: &[f64], l2: f64) -> f64 {
    let n = x.len() as f64;
    let mut loss = 0.0;
    for (row, &y) in x.iter().zip(y01) {
        let z = bias + row.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>();
        let p = sigmoid(z).clamp(1e-12, 1.0 - 1e-12);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    loss / n + 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>()
}

/// Analytic gradient of [`logistic_loss`] with respect to (weights, bias).
pub fn logistic_gradient(
    weights: &[f64],
    bias: f64,
    x: &[Vec<f64>],
    y01: &[f64],
    l2: f64,
) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = 0.0;
    for (row, &y) in x.iter().zip(y01) {
        let z = bias + row.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>();
        let err = sigmoid(z) - y;
        for (g, v) in gw.iter_mut().zip(row) {
            *g += err * v;
        }
        gb += err;
    }
    for (g, w) in gw.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
    }
    (gw, gb / n)
}

fn fit_logistic(params: &Params, x: &[Vec<f64>], y: &[f64]) -> Result<FittedEstimator, EstimatorError> {
    require_rows(x)?;
    let (classes, y01) = binary_classes(y)?;
    let y01: Vec<f64> = y01.into_iter().map(f64::from).collect();
    let lr = f_param(params, "lr", 0.1);
    let l2 = f_param(params, "l2", 1e-4);
    let epochs = i_param(params, "epochs", 200).max(1) as usize;
    let n_features = x[0].len();
    let mut weights = vec![0.0; n_features];
    let mut bias = 0.0;
    for _ in 0..epochs {
        let (gw, gb) = logistic_gradient(&weights, bias, x, &y01, l2);
        for (w, g) in weights.iter_mut().zip(&gw) {
            *w -= lr * g;
        }
        bias -= lr * gb;
    }
    Ok(FittedEstimator::Logistic { classes, weights, bias })
}

/// Neighbor order: distance ascending, then training index — a total order,
/// so results never depend on sort internals.
fn neighbors(x_train: &[Vec<f64>], query: &[f64], k: usize) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = x_train
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let d2: f64 = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2.sqrt(), i)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all
}

fn fit_knn(
    params: &Params,
    x: &[Vec<f64>],
    y: &[f64],
    task: TaskType,
) -> Result<FittedEstimator, EstimatorError> {
    require_rows(x)?;
    let k = (i_param(params, "k", 5).max(1) as usize).min(x.len());
    let weighting = Weighting::parse(s_param(params, "weighting", "uniform"));
    match task {
        TaskType::Binary => {
            let (classes, y01) = binary_classes(y)?;
            Ok(FittedEstimator::KnnClassifier { classes, x: x.to_vec(), y01, k, weighting })
        }
        TaskType::Regression => {
            Ok(FittedEstimator::KnnRegressor { x: x.to_vec(), y: y.to_vec(), k, weighting })
        }
    }
}

fn fit_gnb(params: &Params, x: &[Vec<f64>], y: &[f64]) -> Result<FittedEstimator, EstimatorError> {
    require_rows(x)?;
    let (classes, y01) = binary_classes(y)?;
    let n_features = x[0].len();
    let var_smoothing = f_param(params, "var_smoothing", 1e-9);

    // Smoothing floor scales with the largest overall feature variance.
    let mut max_var = 0.0f64;
    for f in 0..n_features {
        let col: Vec<f64> = x.iter().map(|r| r[f]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        max_var = max_var.max(var);
    }
    let epsilon = var_smoothing * max_var;

    let mut log_priors = [0.0; 2];
    let mut means = [vec![0.0; n_features], vec![0.0; n_features]];
    let mut vars = [vec![0.0; n_features], vec![0.0; n_features]];
    for c in 0..2 {
        let rows: Vec<&Vec<f64>> = x
            .iter()
            .zip(&y01)
            .filter(|(_, &cls)| cls as usize == c)
            .map(|(r, _)| r)
            .collect();
        log_priors[c] = (rows.len() as f64 / x.len() as f64).ln();
        for f in 0..n_features {
            let mean = rows.iter().map(|r| r[f]).sum::<f64>() / rows.len() as f64;
            let var =
                rows.iter().map(|r| (r[f] - mean) * (r[f] - mean)).sum::<f64>() / rows.len() as f64;
            means[c][f] = mean;
            vars[c][f] = (var + epsilon).max(1e-12);
        }
    }
    Ok(FittedEstimator::Gnb { classes, log_priors, means, vars })
}

fn log_likelihood(row: &[f64], means: &[f64], vars: &[f64]) -> f64 {
    row.iter()
        .zip(means.iter().zip(vars))
        .map(|(&v, (&mu, &var))| {
            -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (v - mu) * (v - mu) / (2.0 * var)
        })
        .sum()
}

const GBDT_LEAF_CLIP: f64 = 4.0;
const GBDT_MAX_HALVINGS: usize = 10;

fn gbdt_params(params: &Params) -> (usize, f64, usize, usize) {
    (
        i_param(params, "rounds", 100).max(1) as usize,
        f_param(params, "lr", 0.1),
        i_param(params, "depth", 3).max(1) as usize,
        i_param(params, "min_leaf", 5).max(1) as usize,
    )
}

fn logloss(scores: &[f64], y01: &[f64]) -> f64 {
    scores
        .iter()
        .zip(y01)
        .map(|(&f, &y)| {
            let p = sigmoid(f).clamp(1e-12, 1.0 - 1e-12);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / scores.len() as f64
}

/// Boosted fit shared by both tasks. `loss` scores the additive model, and a
/// tree whose contribution raises the training loss is halved (up to a limit)
/// and then dropped, so the loss trace is non-increasing by construction.
fn boost(
    x: &[Vec<f64>],
    rounds: usize,
    depth: usize,
    min_leaf: usize,
    mut gradients: impl FnMut(&[f64]) -> (Vec<f64>, Vec<f64>),
    leaf_from: impl Fn(f64, f64) -> f64,
    loss: impl Fn(&[f64]) -> f64,
    base_score: f64,
) -> (Vec<Tree>, Vec<f64>) {
    let n = x.len();
    let mut scores = vec![base_score; n];
    let mut trees = Vec::new();
    let mut trace = vec![loss(&scores)];
    for _ in 0..rounds {
        let (g, h) = gradients(&scores);
        let targets: Vec<f64> = g.iter().map(|v| -v).collect();
        let builder = TreeBuilder { x, targets: &targets, max_depth: depth, min_leaf };
        let mut tree = builder.build(&|rows| {
            let gs: f64 = rows.iter().map(|&r| g[r]).sum();
            let hs: f64 = rows.iter().map(|&r| h[r]).sum();
            leaf_from(gs, hs)
        });

        let prev = *trace.last().expect("trace is seeded");
        let mut accepted = false;
        for _ in 0..=GBDT_MAX_HALVINGS {
            let candidate: Vec<f64> = scores
                .iter()
                .zip(x)
                .map(|(&s, row)| s + tree.predict_row(row))
                .collect();
            let now = loss(&candidate);
            if now <= prev + 1e-12 {
                scores = candidate;
                trace.push(now);
                trees.push(tree);
                accepted = true;
                break;
            }
            tree.scale(0.5);
        }
        if !accepted {
            break; // this round can't help; later rounds would repeat it
        }
    }
    (trees, trace)
}

fn fit_gbdt_classifier(
    params: &Params,
    x: &[Vec<f64>],
    y: &[f64],
) -> Result<(FittedEstimator, Vec<f64>), EstimatorError> {
    require_rows(x)?;
    let (classes, y01) = binary_classes(y)?;
    let y01: Vec<f64> = y01.into_iter().map(f64::from).collect();
    let (rounds, lr, depth, min_leaf) = gbdt_params(params);
    let p_mean = y01.iter().sum::<f64>() / y01.len() as f64;
    let base_score = (p_mean / (1.0 - p_mean)).ln();
    let (trees, trace) = boost(
        x,
        rounds,
        depth,
        min_leaf,
        |scores| {
            let g: Vec<f64> = scores.iter().zip(&y01).map(|(&f, &y)| sigmoid(f) - y).collect();
            let h: Vec<f64> = scores
                .iter()
                .map(|&f| {
                    let p = sigmoid(f);
                    (p * (1.0 - p)).max(1e-12)
                })
                .collect();
            (g, h)
        },
        |gs, hs| (lr * (-gs / (hs + 1e-12))).clamp(-GBDT_LEAF_CLIP, GBDT_LEAF_CLIP),
        |scores| logloss(scores, &y01),
        base_score,
    );
    Ok((FittedEstimator::GbdtClassifier { classes, base_score, trees }, trace))
}

fn fit_gbdt_regressor(
    params: &Params,
    x: &[Vec<f64>],
    y: &[f64],
) -> Result<(FittedEstimator, Vec<f64>), EstimatorError> {
    require_rows(x)?;
    let (rounds, lr, depth, min_leaf) = gbdt_params(params);
    let base_score = y.iter().sum::<f64>() / y.len() as f64;
    let (trees, trace) = boost(
        x,
        rounds,
        depth,
        min_leaf,
        |scores| {
            let g: Vec<f64> = scores.iter().zip(y).map(|(&f, &t)| f - t).collect();
            let h = vec![1.0; scores.len()];
            (g, h)
        },
        |gs, hs| lr * (-gs / (hs + 1e-12)),
        |scores| {
            scores.iter().zip(y).map(|(&f, &t)| (f - t) * (f - t)).sum::<f64>()
                / scores.len() as f64
        },
        base_score,
    );
    Ok((FittedEstimator::GbdtRegressor { base_score, trees }, trace))
}

/// Solves `A w = b` in place by Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>, EstimatorError> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-12 {
            return Err(EstimatorError::SingularFit {
                detail: "normal equations are singular".into(),
            });
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut w = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * w[k];
        }
        w[row] = acc / a[row][row];
    }
    Ok(w)
}

fn fit_ridge(params: &Params, x: &[Vec<f64>], y: &[f64]) -> Result<FittedEstimator, EstimatorError> {
    require_rows(x)?;
    let alpha = f_param(params, "alpha", 1e-3);
    let p = x[0].len();
    // Augmented design: p feature columns plus a trailing bias column of ones.
    let dim = p + 1;
    let mut xtx = vec![vec![0.0; dim]; dim];
    let mut xty = vec![0.0; dim];
    for (row, &target) in x.iter().zip(y) {
        for i in 0..dim {
            let xi = if i < p { row[i] } else { 1.0 };
            xty[i] += xi * target;
            for j in i..dim {
                let xj = if j < p { row[j] } else { 1.0 };
                xtx[i][j] += xi * xj;
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            xtx[i][j] = xtx[j][i];
        }
    }
    // Penalize weights only; the intercept stays free.
    for (i, row) in xtx.iter_mut().enumerate().take(p) {
        row[i] += alpha;
    }
    let mut solution = solve_linear(xtx, xty)?;
    let bias = solution.pop().expect("bias slot");
    Ok(FittedEstimator::Ridge { weights: solution, bias })
}

/// Trains one estimator. `seed` keeps the signature uniform for families that
/// need randomness; the built-in set is fully deterministic without it.
pub fn fit(
    name: &str,
    task: TaskType,
    params: &Params,
    x: &[Vec<f64>],
    y: &[f64],
    _seed: u64,
) -> Result<FittedEstimator, EstimatorError> {
    match (name, task) {
        ("logistic", TaskType::Binary) => fit_logistic(params, x, y),
        ("knn", _) => fit_knn(params, x, y, task),
        ("gnb", TaskType::Binary) => fit_gnb(params, x, y),
        ("gbdt", TaskType::Binary) => fit_gbdt_classifier(params, x, y).map(|(m, _)| m),
        ("gbdt", TaskType::Regression) => fit_gbdt_regressor(params, x, y).map(|(m, _)| m),
        ("ridge", TaskType::Regression) => fit_ridge(params, x, y),
        _ => Err(EstimatorError::UnknownEstimator { name: name.to_owned(), task }),
    }
}

/// Training-loss trace per boosting round, for the monotonicity property.
#[cfg(test)]
pub(crate) fn gbdt_loss_trace(
    task: TaskType,
    params: &Params,
    x: &[Vec<f64>],
    y: &[f64],
) -> Result<Vec<f64>, EstimatorError> {
    match task {
        TaskType::Binary => fit_gbdt_classifier(params, x, y).map(|(_, t)| t),
        TaskType::Regression => fit_gbdt_regressor(params, x, y).map(|(_, t)| t),
    }
}

impl FittedEstimator {
    pub fn task_type(&self) -> TaskType {
        match self {
            FittedEstimator::Logistic { .. }
            | FittedEstimator::KnnClassifier { .. }
            | FittedEstimator::Gnb { .. }
            | FittedEstimator::GbdtClassifier { .. } => TaskType::Binary,
            _ => TaskType::Regression,
        }
    }

    /// Probability of the positive (larger) class for binary models; `None`
    /// for regression.
    pub fn decision_scores(&self, x: &[Vec<f64>]) -> Option<Vec<f64>> {
        match self {
            FittedEstimator::Logistic { weights, bias, .. } => Some(
                x.iter()
                    .map(|row| {
                        sigmoid(bias + row.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>())
                    })
                    .collect(),
            ),
            FittedEstimator::KnnClassifier { x: train, y01, k, weighting, .. } => Some(
                x.iter()
                    .map(|query| {
                        let mut pos = 0.0;
                        let mut total = 0.0;
                        for (d, i) in neighbors(train, query, *k) {
                            let w = weighting.weight(d);
                            total += w;
                            if y01[i] == 1 {
                                pos += w;
                            }
                        }
                        if total > 0.0 {
                            pos / total
                        } else {
                            0.5
                        }
                    })
                    .collect(),
            ),
            FittedEstimator::Gnb { log_priors, means, vars, .. } => Some(
                x.iter()
                    .map(|row| {
                        let a0 = log_priors[0] + log_likelihood(row, &means[0], &vars[0]);
                        let a1 = log_priors[1] + log_likelihood(row, &means[1], &vars[1]);
                        sigmoid(a1 - a0)
                    })
                    .collect(),
            ),
            FittedEstimator::GbdtClassifier { base_score, trees, .. } => Some(
                x.iter()
                    .map(|row| {
                        let f: f64 =
                            base_score + trees.iter().map(|t| t.predict_row(row)).sum::<f64>();
                        sigmoid(f)
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Class labels (binary) or real values (regression).
    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<f64> {
        match self {
            FittedEstimator::Logistic { classes, .. }
            | FittedEstimator::KnnClassifier { classes, .. }
            | FittedEstimator::Gnb { classes, .. }
            | FittedEstimator::GbdtClassifier { classes, .. } => {
                let scores = self.decision_scores(x).expect("binary model has scores");
                // Exact 0.5 resolves to the smaller class.
                scores
                    .into_iter()
                    .map(|s| if s > 0.5 { classes[1] } else { classes[0] })
                    .collect()
            }
            FittedEstimator::Ridge { weights, bias } => x
                .iter()
                .map(|row| bias + row.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>())
                .collect(),
            FittedEstimator::KnnRegressor { x: train, y, k, weighting } => x
                .iter()
                .map(|query| {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for (d, i) in neighbors(train, query, *k) {
                        let w = weighting.weight(d);
                        num += w * y[i];
                        den += w;
                    }
                    if den > 0.0 {
                        num / den
                    } else {
                        0.0
                    }
                })
                .collect(),
            FittedEstimator::GbdtRegressor { base_score, trees } => x
                .iter()
                .map(|row| base_score + trees.iter().map(|t| t.predict_row(row)).sum::<f64>())
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automl::tuner::ParamValue;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn separable() -> (Vec<Vec<f64>>, Vec<f64>) {
        let x = vec![
            vec![0.1, 0.2],
            vec![0.2, 0.1],
            vec![0.15, 0.25],
            vec![0.8, 0.9],
            vec![0.9, 0.8],
            vec![0.85, 0.75],
        ];
        let y = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        (x, y)
    }

    fn accuracy(pred: &[f64], truth: &[f64]) -> f64 {
        pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
    }

    #[test]
    fn logistic_separates_toy_data() {
        let (x, y) = separable();
        let params = Params::from([
            ("lr".to_owned(), ParamValue::Float(0.5)),
            ("epochs".to_owned(), ParamValue::Int(300)),
        ]);
        let model = fit("logistic", TaskType::Binary, &params, &x, &y, 0).unwrap();
        assert_eq!(accuracy(&model.predict(&x), &y), 1.0);
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for _ in 0..5 {
            let n = rng.gen_range(4..10);
            let p = rng.gen_range(1..4);
            let x: Vec<Vec<f64>> =
                (0..n).map(|_| (0..p).map(|_| rng.gen::<f64>()).collect()).collect();
            let y01: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let weights: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bias: f64 = rng.gen_range(-1.0..1.0);
            let l2 = 0.01;
            let (gw, gb) = logistic_gradient(&weights, bias, &x, &y01, l2);
            let h = 1e-6;
            for j in 0..p {
                let mut plus = weights.clone();
                let mut minus = weights.clone();
                plus[j] += h;
                minus[j] -= h;
                let fd = (logistic_loss(&plus, bias, &x, &y01, l2)
                    - logistic_loss(&minus, bias, &x, &y01, l2))
                    / (2.0 * h);
                let rel = (gw[j] - fd).abs() / gw[j].abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-5, "weight {j}: analytic {} vs fd {fd}", gw[j]);
            }
            let fd = (logistic_loss(&weights, bias + h, &x, &y01, l2)
                - logistic_loss(&weights, bias - h, &x, &y01, l2))
                / (2.0 * h);
            let rel = (gb - fd).abs() / gb.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-5, "bias: analytic {gb} vs fd {fd}");
        }
    }

    #[test]
    fn knn_k1_recalls_training_labels() {
        let (x, y) = separable();
        let params = Params::from([("k".to_owned(), ParamValue::Int(1))]);
        let model = fit("knn", TaskType::Binary, &params, &x, &y, 0).unwrap();
        assert_eq!(model.predict(&x), y);
    }

    #[test]
    fn knn_distance_weighting_prefers_closer_cluster() {
        let (x, y) = separable();
        let params = Params::from([
            ("k".to_owned(), ParamValue::Int(6)),
            (
                "weighting".to_owned(),
                ParamValue::Str("distance".into()),
            ),
        ]);
        let model = fit("knn", TaskType::Binary, &params, &x, &y, 0).unwrap();
        let pred = model.predict(&[vec![0.12, 0.18], vec![0.88, 0.82]]);
        assert_eq!(pred, vec![0.0, 1.0]);
    }

    #[test]
    fn gnb_separates_toy_data() {
        let (x, y) = separable();
        let model = fit("gnb", TaskType::Binary, &Params::new(), &x, &y, 0).unwrap();
        assert_eq!(accuracy(&model.predict(&x), &y), 1.0);
        let scores = model.decision_scores(&x).unwrap();
        assert!(scores[0] < 0.5 && scores[3] > 0.5);
    }

    #[test]
    fn gbdt_classifier_fits_toy_data() {
        let (x, y) = separable();
        // Six rows can't satisfy the default leaf minimum of five.
        let params = Params::from([("min_leaf".to_owned(), ParamValue::Int(1))]);
        let model = fit("gbdt", TaskType::Binary, &params, &x, &y, 0).unwrap();
        assert_eq!(accuracy(&model.predict(&x), &y), 1.0);
    }

    #[test]
    fn gbdt_training_loss_non_increasing() {
        let (x, y) = separable();
        let trace = gbdt_loss_trace(TaskType::Binary, &Params::new(), &x, &y).unwrap();
        for pair in trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "loss rose: {pair:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn gbdt_loss_monotone_on_random_data(seed in 0u64..500) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let n = rng.gen_range(6..30);
            let x: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.gen::<f64>()).collect())
                .collect();
            let y: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let distinct: std::collections::BTreeSet<u64> = y.iter().map(|v| *v as u64).collect();
            prop_assume!(distinct.len() == 2);
            let params = Params::from([
                ("rounds".to_owned(), ParamValue::Int(30)),
            ]);
            let trace = gbdt_loss_trace(TaskType::Binary, &params, &x, &y).unwrap();
            for pair in trace.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 1e-12);
            }
            let trace = gbdt_loss_trace(TaskType::Regression, &params, &x, &y).unwrap();
            for pair in trace.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 1e-12);
            }
        }
    }

    #[test]
    fn ridge_recovers_line() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| 2.0 * r[0] + 1.0).collect();
        let params = Params::from([("alpha".to_owned(), ParamValue::Float(1e-12))]);
        let model = fit("ridge", TaskType::Regression, &params, &x, &y, 0).unwrap();
        let FittedEstimator::Ridge { weights, bias } = &model else { panic!() };
        assert!((weights[0] - 2.0).abs() < 1e-6, "slope {}", weights[0]);
        assert!((bias - 1.0).abs() < 1e-6, "intercept {bias}");
    }

    #[test]
    fn knn_regressor_averages_neighbors() {
        let x = vec![vec![0.0], vec![1.0], vec![10.0]];
        let y = vec![0.0, 2.0, 100.0];
        let params = Params::from([("k".to_owned(), ParamValue::Int(2))]);
        let model = fit("knn", TaskType::Regression, &params, &x, &y, 0).unwrap();
        let pred = model.predict(&[vec![0.5]]);
        assert_eq!(pred, vec![1.0]);
    }

    #[test]
    fn gbdt_regressor_beats_mean_baseline() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 40.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| 3.0 * r[0]).collect();
        let model = fit("gbdt", TaskType::Regression, &Params::new(), &x, &y, 0).unwrap();
        let pred = model.predict(&x);
        let mse: f64 =
            pred.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let baseline: f64 =
            y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.len() as f64;
        assert!(mse < baseline / 10.0, "mse {mse} vs baseline {baseline}");
    }

    #[test]
    fn one_class_labels_are_singular() {
        let x = vec![vec![0.0], vec![1.0]];
        let y = vec![1.0, 1.0];
        for name in registry(TaskType::Binary) {
            let err = fit(name, TaskType::Binary, &Params::new(), &x, &y, 0).unwrap_err();
            assert!(matches!(err, EstimatorError::SingularFit { .. }), "{name}");
        }
    }

    #[test]
    fn fitted_models_round_trip_serde() {
        let (x, y) = separable();
        for name in registry(TaskType::Binary) {
            let model = fit(name, TaskType::Binary, &Params::new(), &x, &y, 0).unwrap();
            let json = serde_json::to_string(&model).unwrap();
            let back: FittedEstimator = serde_json::from_str(&json).unwrap();
            assert_eq!(back, model, "{name}");
            assert_eq!(back.predict(&x), model.predict(&x));
        }
        let yr: Vec<f64> = x.iter().map(|r| r[0] + r[1]).collect();
        for name in registry(TaskType::Regression) {
            let model = fit(name, TaskType::Regression, &Params::new(), &x, &yr, 0).unwrap();
            let json = serde_json::to_string(&model).unwrap();
            let back: FittedEstimator = serde_json::from_str(&json).unwrap();
            assert_eq!(back, model, "{name}");
        }
    }

    #[test]
    fn refits_are_identical() {
        let (x, y) = separable();
        for name in registry(TaskType::Binary) {
            let a = fit(name, TaskType::Binary, &Params::new(), &x, &y, 7).unwrap();
            let b = fit(name, TaskType::Binary, &Params::new(), &x, &y, 7).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn every_registry_entry_has_a_space() {
        for task in [TaskType::Binary, TaskType::Regression] {
            for name in registry(task) {
                let space = default_space(name, task).unwrap();
                space.validate().unwrap();
            }
        }
        assert!(default_space("mystery", TaskType::Binary).is_err());
    }
}
