//! Gradient-boosted decision trees for a binary logistic objective.
//!
//! Trees are grown depth-wise with exact greedy splits over presorted
//! feature columns. Split gain and leaf weights use second-order statistics
//! with L1 (soft-thresholding) and L2 regularization:
//!
//! ```text
//! S(G)   = sign(G) * max(|G| - alpha, 0)
//! weight = -S(G) / (H + lambda)                       (times the learning rate)
//! gain   = 1/2 [S(GL)^2/(HL+lambda) + S(GR)^2/(HR+lambda) - S(G)^2/(H+lambda)] - gamma
//! ```
//!
//! Training stops early when the validation AUROC has not improved for
//! `early_stopping_patience` rounds; prediction uses the best prefix of trees.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::statlab;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BoostError {
    #[error("empty training table")]
    EmptyTable,
    #[error("degenerate labels: training labels must contain both classes")]
    DegenerateLabels,
    #[error("validation labels must contain both classes to compute AUROC")]
    DegenerateValidation,
    #[error("labels must be 0 or 1, found {0}")]
    InvalidLabel(u8),
    #[error("feature count mismatch: expected {expected}, found {found}")]
    FeatureCountMismatch { expected: usize, found: usize },
    #[error("row count mismatch: {rows} rows but {labels} labels")]
    RowCountMismatch { rows: usize, labels: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("model version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt model: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major matrix of feature values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_rows * n_cols, "matrix data length");
        Self { n_rows, n_cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for r in rows {
            assert_eq!(r.len(), n_cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), n_cols, data)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_cols.max(1)).take(self.n_rows)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.n_cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::new(idx.len(), self.n_cols, data)
    }

    pub fn select_cols(&self, cols: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.n_rows * cols.len());
        for i in 0..self.n_rows {
            let r = self.row(i);
            data.extend(cols.iter().map(|&c| r[c]));
        }
        Self::new(self.n_rows, cols.len(), data)
    }

    fn check_finite(&self) -> Result<(), BoostError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(k) => Err(BoostError::NonFinite {
                row: k / self.n_cols,
                col: k % self.n_cols,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_depth: usize,
    /// Minimum Hessian sum in each child of a split.
    pub min_child_weight: f64,
    pub subsample: f64,
    pub colsample_bytree: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub max_rounds: usize,
    pub early_stopping_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            max_depth: 3,
            min_child_weight: 3.0,
            subsample: 0.6,
            colsample_bytree: 0.75,
            alpha: 0.5,
            lambda: 5.0,
            gamma: 0.5,
            max_rounds: 1000,
            early_stopping_patience: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), BoostError> {
        let bad = |msg: String| Err(BoostError::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad(format!("learning_rate must be in (0, 1], got {}", self.learning_rate));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad(format!("subsample must be in (0, 1], got {}", self.subsample));
        }
        if !(self.colsample_bytree > 0.0 && self.colsample_bytree <= 1.0) {
            return bad(format!("colsample_bytree must be in (0, 1], got {}", self.colsample_bytree));
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1".into());
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("min_child_weight", self.min_child_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.lambda == 0.0 && self.min_child_weight == 0.0 {
            return bad("lambda and min_child_weight cannot both be 0".into());
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be at least 1".into());
        }
        Ok(())
    }

    /// L1 soft-thresholding of a gradient sum.
    #[inline]
    pub fn soft_threshold(&self, g: f64) -> f64 {
        if g > self.alpha {
            g - self.alpha
        } else if g < -self.alpha {
            g + self.alpha
        } else {
            0.0
        }
    }

    #[inline]
    fn score(&self, g: f64, h: f64) -> f64 {
        let s = self.soft_threshold(g);
        let denom = h + self.lambda;
        if denom > 0.0 {
            s * s / denom
        } else {
            0.0
        }
    }

    /// Regularized loss reduction of splitting (G, H) into left and right.
    pub fn split_gain(&self, gl: f64, hl: f64, gr: f64, hr: f64) -> f64 {
        0.5 * (self.score(gl, hl) + self.score(gr, hr) - self.score(gl + gr, hl + hr)) - self.gamma
    }

    /// Unscaled optimal leaf weight.
    pub fn leaf_weight(&self, g: f64, h: f64) -> f64 {
        let denom = h + self.lambda;
        if denom > 0.0 {
            -self.soft_threshold(g) / denom
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Node {
    /// Rows with `value < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Hessian sum of the rows reaching this node.
        cover: f64,
        /// Gradient sum of the rows reaching this node.
        grad: f64,
        gain: f64,
    },
    Leaf {
        /// Margin contribution, learning rate included.
        weight: f64,
        cover: f64,
        grad: f64,
    },
}

impl Node {
    pub fn cover(&self) -> f64 {
        match *self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => cover,
        }
    }

    pub fn grad(&self) -> f64 {
        match *self {
            Node::Split { grad, .. } | Node::Leaf { grad, .. } => grad,
        }
    }
}

/// A binary tree stored as an arena; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(weight: f64, cover: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf {
                weight,
                cover,
                grad: 0.0,
            }],
        }
    }

    /// Index of the leaf reached by `x`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf { weight, .. } => weight,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. }))
    }

    fn validate(&self, feature_count: usize) -> Result<(), BoostError> {
        if self.nodes.is_empty() {
            return Err(BoostError::Corrupt("tree without nodes".into()));
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                return Err(BoostError::Corrupt(format!("node {i} reached twice")));
            }
            if let Node::Split {
                feature, left, right, ..
            } = self.nodes[i]
            {
                if feature >= feature_count {
                    return Err(BoostError::Corrupt(format!("split on feature {feature} of {feature_count}")));
                }
                for c in [left, right] {
                    if c >= self.nodes.len() || c <= i {
                        return Err(BoostError::Corrupt(format!("node {i} has invalid child {c}")));
                    }
                    stack.push(c);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TreeEnsemble {
    pub version: u32,
    pub base_margin: f64,
    /// Number of leading trees used for prediction.
    pub best_round: usize,
    pub feature_count: usize,
    #[serde(default)]
    pub feature_names: Vec<String>,
    #[serde(default)]
    pub registry_hash: Option<String>,
    pub trees: Vec<Tree>,
}

pub fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

impl TreeEnsemble {
    /// An ensemble with no trees.
    pub fn constant(base_margin: f64, feature_count: usize) -> Self {
        Self {
            version: MODEL_FORMAT_VERSION,
            base_margin,
            best_round: 0,
            feature_count,
            feature_names: Vec::new(),
            registry_hash: None,
            trees: Vec::new(),
        }
    }

    /// Trees used for prediction.
    pub fn active_trees(&self) -> &[Tree] {
        &self.trees[..self.best_round.min(self.trees.len())]
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self, BoostError> {
        if names.len() != self.feature_count {
            return Err(BoostError::FeatureCountMismatch {
                expected: self.feature_count,
                found: names.len(),
            });
        }
        self.feature_names = names;
        Ok(self)
    }

    pub fn check_features(&self, x: &[f64]) -> Result<(), BoostError> {
        if x.len() != self.feature_count {
            return Err(BoostError::FeatureCountMismatch {
                expected: self.feature_count,
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn predict_margin(&self, x: &[f64]) -> Result<f64, BoostError> {
        self.check_features(x)?;
        Ok(self.margin_unchecked(x))
    }

    pub(crate) fn margin_unchecked(&self, x: &[f64]) -> f64 {
        self.base_margin + self.active_trees().iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, BoostError> {
        Ok(sigmoid(self.predict_margin(x)?))
    }

    pub fn predict_proba_batch(&self, x: &FeatureMatrix) -> Result<Vec<f64>, BoostError> {
        if x.n_cols() != self.feature_count {
            return Err(BoostError::FeatureCountMismatch {
                expected: self.feature_count,
                found: x.n_cols(),
            });
        }
        Ok(x.rows().map(|r| sigmoid(self.margin_unchecked(r))).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ensemble serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, BoostError> {
        let probe: serde_json::Value =
            serde_json::from_str(text).map_err(|e| BoostError::Corrupt(e.to_string()))?;
        let version = probe
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| BoostError::Corrupt("missing version".into()))?;
        if version != MODEL_FORMAT_VERSION as u64 {
            return Err(BoostError::VersionMismatch {
                found: version as u32,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let e: TreeEnsemble = serde_json::from_value(probe).map_err(|e| BoostError::Corrupt(e.to_string()))?;
        if e.best_round > e.trees.len() {
            return Err(BoostError::Corrupt(format!(
                "bestRound {} exceeds {} trees",
                e.best_round,
                e.trees.len()
            )));
        }
        if !e.feature_names.is_empty() && e.feature_names.len() != e.feature_count {
            return Err(BoostError::Corrupt("feature name count differs from featureCount".into()));
        }
        for t in &e.trees {
            t.validate(e.feature_count)?;
        }
        Ok(e)
    }
}

pub fn save_model(path: impl AsRef<Path>, e: &TreeEnsemble) -> Result<(), BoostError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(e.to_json().as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TreeEnsemble, BoostError> {
    TreeEnsemble::from_json(&std::fs::read_to_string(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainLogRow {
    pub round: usize,
    pub train_logloss: f64,
    #[serde(rename = "validAUC")]
    pub valid_auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub ensemble: TreeEnsemble,
    pub log: Vec<TrainLogRow>,
}

pub fn write_train_log<W: Write>(out: W, log: &[TrainLogRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean logistic loss of margins against labels.
pub fn logloss(margins: &[f64], y: &[u8]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(y)
        .map(|(&m, &t)| {
            // ln(1 + e^m) - t*m, computed without overflow
            let softplus = if m > 0.0 { m + (-m).exp().ln_1p() } else { m.exp().ln_1p() };
            softplus - t as f64 * m
        })
        .sum();
    total / margins.len() as f64
}

fn check_labels(y: &[u8]) -> Result<(), BoostError> {
    match y.iter().find(|&&v| v > 1) {
        Some(&v) => Err(BoostError::InvalidLabel(v)),
        None => Ok(()),
    }
}

/// Per-row status while a tree is grown: `None` for rows outside the
/// subsample, otherwise the node the row currently sits in.
type Placement = Vec<Option<u32>>;

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    gl: f64,
    hl: f64,
}

struct TreeBuilder<'a> {
    x: &'a FeatureMatrix,
    sorted: &'a [Vec<u32>],
    cfg: &'a TrainConfig,
}

impl TreeBuilder<'_> {
    fn grow(&self, grad: &[f64], hess: &[f64], placement: &mut Placement, columns: &[usize]) -> Tree {
        let (mut g0, mut h0) = (0.0, 0.0);
        for (r, p) in placement.iter().enumerate() {
            if p.is_some() {
                g0 += grad[r];
                h0 += hess[r];
            }
        }
        // provisional leaves; split nodes are rewritten in place
        let mut nodes = vec![Node::Leaf {
            weight: 0.0,
            cover: h0,
            grad: g0,
        }];
        let mut frontier = vec![0usize];
        for _depth in 0..self.cfg.max_depth {
            if frontier.is_empty() {
                break;
            }
            let best = self.find_splits(grad, hess, placement, columns, &nodes, &frontier);
            let mut next = Vec::new();
            let mut remap: Vec<Option<(usize, f64, u32, u32)>> = vec![None; nodes.len()];
            for &t in &frontier {
                let Some(c) = best[t] else { continue };
                let (g, h) = (nodes[t].grad(), nodes[t].cover());
                let left = nodes.len();
                let right = left + 1;
                nodes.push(Node::Leaf {
                    weight: 0.0,
                    cover: c.hl,
                    grad: c.gl,
                });
                nodes.push(Node::Leaf {
                    weight: 0.0,
                    cover: h - c.hl,
                    grad: g - c.gl,
                });
                nodes[t] = Node::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left,
                    right,
                    cover: h,
                    grad: g,
                    gain: c.gain,
                };
                remap[t] = Some((c.feature, c.threshold, left as u32, right as u32));
                next.push(left);
                next.push(right);
            }
            for (r, p) in placement.iter_mut().enumerate() {
                if let Some(t) = *p {
                    if let Some((f, thr, l, rr)) = remap[t as usize] {
                        *p = Some(if self.x.get(r, f) < thr { l } else { rr });
                    }
                }
            }
            frontier = next;
        }
        for n in &mut nodes {
            if let Node::Leaf { weight, cover, grad } = n {
                *weight = self.cfg.leaf_weight(*grad, *cover) * self.cfg.learning_rate;
            }
        }
        Tree { nodes }
    }

    /// Best split per frontier node, scanning each column once in sorted order.
    fn find_splits(
        &self,
        grad: &[f64],
        hess: &[f64],
        placement: &Placement,
        columns: &[usize],
        nodes: &[Node],
        frontier: &[usize],
    ) -> Vec<Option<Candidate>> {
        let n_nodes = nodes.len();
        let mut active = vec![false; n_nodes];
        for &t in frontier {
            active[t] = true;
        }
        let mut best: Vec<Option<Candidate>> = vec![None; n_nodes];
        let mut gl = vec![0.0; n_nodes];
        let mut hl = vec![0.0; n_nodes];
        let mut last: Vec<Option<f64>> = vec![None; n_nodes];
        let mcw = self.cfg.min_child_weight;
        for &f in columns {
            gl.iter_mut().for_each(|v| *v = 0.0);
            hl.iter_mut().for_each(|v| *v = 0.0);
            last.iter_mut().for_each(|v| *v = None);
            for &r in &self.sorted[f] {
                let r = r as usize;
                let Some(t) = placement[r] else { continue };
                let t = t as usize;
                if !active[t] {
                    continue;
                }
                let v = self.x.get(r, f);
                if let Some(prev) = last[t] {
                    if v > prev {
                        let (g, h) = (nodes[t].grad(), nodes[t].cover());
                        let (lg, lh) = (gl[t], hl[t]);
                        let (rg, rh) = (g - lg, h - lh);
                        if lh >= mcw && rh >= mcw {
                            let gain = self.cfg.split_gain(lg, lh, rg, rh);
                            if gain > best[t].map_or(0.0, |c| c.gain) {
                                let mid = 0.5 * (prev + v);
                                let threshold = if mid > prev && mid <= v { mid } else { v };
                                best[t] = Some(Candidate {
                                    gain,
                                    feature: f,
                                    threshold,
                                    gl: lg,
                                    hl: lh,
                                });
                            }
                        }
                    }
                }
                gl[t] += grad[r];
                hl[t] += hess[r];
                last[t] = Some(v);
            }
        }
        best
    }
}

/// Trains a boosted ensemble. `valid` drives early stopping.
pub fn train(
    x: &FeatureMatrix,
    y: &[u8],
    valid_x: &FeatureMatrix,
    valid_y: &[u8],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, BoostError> {
    cfg.validate()?;
    let n = x.n_rows();
    if n == 0 || x.n_cols() == 0 {
        return Err(BoostError::EmptyTable);
    }
    if y.len() != n {
        return Err(BoostError::RowCountMismatch { rows: n, labels: y.len() });
    }
    if valid_y.len() != valid_x.n_rows() {
        return Err(BoostError::RowCountMismatch {
            rows: valid_x.n_rows(),
            labels: valid_y.len(),
        });
    }
    if valid_x.n_cols() != x.n_cols() {
        return Err(BoostError::FeatureCountMismatch {
            expected: x.n_cols(),
            found: valid_x.n_cols(),
        });
    }
    check_labels(y)?;
    check_labels(valid_y)?;
    x.check_finite()?;
    valid_x.check_finite()?;
    let positives = y.iter().filter(|&&v| v == 1).count();
    if positives == 0 || positives == n {
        return Err(BoostError::DegenerateLabels);
    }
    let vpos = valid_y.iter().filter(|&&v| v == 1).count();
    if vpos == 0 || vpos == valid_y.len() {
        return Err(BoostError::DegenerateValidation);
    }

    let n_cols = x.n_cols();
    let sorted: Vec<Vec<u32>> = (0..n_cols)
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| x.get(a as usize, f).total_cmp(&x.get(b as usize, f)));
            idx
        })
        .collect();
    let builder = TreeBuilder {
        x,
        sorted: &sorted,
        cfg,
    };

    let mean = positives as f64 / n as f64;
    let base_margin = (mean / (1.0 - mean)).ln().clamp(-10.0, 10.0);
    let mut ensemble = TreeEnsemble::constant(base_margin, n_cols);
    let mut margins = vec![base_margin; n];
    let mut valid_margins = vec![base_margin; valid_x.n_rows()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_rows_sampled = ((n as f64 * cfg.subsample).round() as usize).clamp(1, n);
    let n_cols_sampled = ((n_cols as f64 * cfg.colsample_bytree).floor() as usize).clamp(1, n_cols);

    let mut log = Vec::new();
    let mut best_auc = f64::NEG_INFINITY;
    let mut best_round = 0;
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for round in 1..=cfg.max_rounds {
        for r in 0..n {
            let p = sigmoid(margins[r]);
            grad[r] = p - y[r] as f64;
            hess[r] = p * (1.0 - p);
        }
        let mut placement: Placement = vec![None; n];
        if n_rows_sampled == n {
            placement.iter_mut().for_each(|p| *p = Some(0));
        } else {
            for r in sample(&mut rng, n, n_rows_sampled) {
                placement[r] = Some(0);
            }
        }
        let mut columns: Vec<usize> = if n_cols_sampled == n_cols {
            (0..n_cols).collect()
        } else {
            sample(&mut rng, n_cols, n_cols_sampled).into_vec()
        };
        columns.sort_unstable();

        let tree = builder.grow(&grad, &hess, &mut placement, &columns);
        for (r, m) in margins.iter_mut().enumerate() {
            *m += tree.predict(x.row(r));
        }
        for (r, m) in valid_margins.iter_mut().enumerate() {
            *m += tree.predict(valid_x.row(r));
        }
        ensemble.trees.push(tree);

        let auc = statlab::auroc(&valid_margins, valid_y).expect("validation has both classes");
        log.push(TrainLogRow {
            round,
            train_logloss: logloss(&margins, y),
            valid_auc: auc,
        });
        if auc > best_auc {
            best_auc = auc;
            best_round = round;
        } else if round - best_round >= cfg.early_stopping_patience {
            break;
        }
    }
    ensemble.best_round = best_round;
    Ok(TrainOutcome { ensemble, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn separable(n: usize, seed: u64) -> (FeatureMatrix, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let mag: f64 = rng.random_range(0.01..3.0);
            let label = (i % 2) as u8;
            rows.push(vec![if label == 1 { mag } else { -mag }]);
            y.push(label);
        }
        (FeatureMatrix::from_rows(&rows), y)
    }

    fn xor(n: usize, seed: u64) -> (FeatureMatrix, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            rows.push(vec![a, b]);
            y.push(((a > 0.0) ^ (b > 0.0)) as u8);
        }
        (FeatureMatrix::from_rows(&rows), y)
    }

    #[test]
    fn soft_threshold_and_weights() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.soft_threshold(2.0), 1.5);
        assert_eq!(cfg.soft_threshold(-2.0), -1.5);
        assert_eq!(cfg.soft_threshold(0.3), 0.0);
        assert_eq!(cfg.leaf_weight(2.0, 5.0), -0.15);
        let g = cfg.split_gain(3.0, 4.0, -3.0, 4.0);
        let expect = 0.5 * (2.5f64.powi(2) / 9.0 * 2.0 - 0.0) - 0.5;
        assert!((g - expect).abs() < 1e-15);
    }

    #[test]
    fn degenerate_labels() {
        let x = FeatureMatrix::from_rows(&[vec![1.0], vec![2.0]]);
        let err = train(&x, &[1, 1], &x, &[0, 1], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, BoostError::DegenerateLabels));
        assert!(err.to_string().contains("degenerate labels"));
        let empty = FeatureMatrix::new(0, 1, vec![]);
        assert!(matches!(
            train(&empty, &[], &x, &[0, 1], &TrainConfig::default()),
            Err(BoostError::EmptyTable)
        ));
        let wide = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]);
        assert!(matches!(
            train(&x, &[0, 1], &wide, &[0, 1], &TrainConfig::default()),
            Err(BoostError::FeatureCountMismatch { .. })
        ));
    }

    #[test]
    fn separable_reaches_perfect_auc_quickly() {
        let (x, y) = separable(200, 1);
        let (vx, vy) = separable(200, 2);
        let out = train(&x, &y, &vx, &vy, &TrainConfig::default()).unwrap();
        let first_perfect = out.log.iter().find(|r| r.valid_auc == 1.0).map(|r| r.round);
        assert!(first_perfect.is_some_and(|r| r <= 50), "{first_perfect:?}");
        let probs = out.ensemble.predict_proba_batch(&vx).unwrap();
        assert_eq!(statlab::auroc(&probs, &vy).unwrap(), 1.0);
    }

    #[test]
    fn stumps_cannot_learn_xor() {
        let (x, y) = xor(400, 3);
        let (vx, vy) = xor(400, 4);
        let cfg = TrainConfig {
            max_depth: 1,
            ..Default::default()
        };
        let out = train(&x, &y, &vx, &vy, &cfg).unwrap();
        let probs = out.ensemble.predict_proba_batch(&vx).unwrap();
        assert!(statlab::auroc(&probs, &vy).unwrap() <= 0.6);
        // with two columns the default colsample keeps one per tree, which
        // cannot express XOR at any depth
        let cfg = TrainConfig {
            gamma: 0.0,
            alpha: 0.0,
            colsample_bytree: 1.0,
            max_rounds: 300,
            early_stopping_patience: 300,
            ..Default::default()
        };
        let deep = train(&x, &y, &vx, &vy, &cfg).unwrap();
        let probs = deep.ensemble.predict_proba_batch(&vx).unwrap();
        let auc = statlab::auroc(&probs, &vy).unwrap();
        assert!(auc > 0.9, "{auc} {}", deep.ensemble.best_round);
    }

    #[test]
    fn structural_invariants_hold() {
        let (x, y) = xor(300, 5);
        let cfg = TrainConfig::default();
        let out = train(&x, &y, &x, &y, &cfg).unwrap();
        for t in &out.ensemble.trees {
            assert!(t.depth() <= cfg.max_depth);
            for n in &t.nodes {
                if let Node::Split {
                    left,
                    right,
                    cover,
                    gain,
                    ..
                } = *n
                {
                    let (l, r) = (&t.nodes[left], &t.nodes[right]);
                    assert!((l.cover() + r.cover() - cover).abs() <= 1e-9 * cover.max(1.0));
                    let recomputed = cfg.split_gain(l.grad(), l.cover(), r.grad(), r.cover());
                    assert!((recomputed - gain).abs() <= 1e-9);
                    assert!(gain > 0.0);
                }
            }
        }
    }

    #[test]
    fn full_sample_logloss_never_increases() {
        for seed in 0..4 {
            let (x, y) = xor(200, 100 + seed);
            let cfg = TrainConfig {
                subsample: 1.0,
                colsample_bytree: 1.0,
                gamma: 0.0,
                alpha: 0.0,
                max_rounds: 150,
                early_stopping_patience: 1000,
                seed,
                ..Default::default()
            };
            let out = train(&x, &y, &x, &y, &cfg).unwrap();
            for w in out.log.windows(2) {
                assert!(w[1].train_logloss <= w[0].train_logloss + 1e-12, "{w:?}");
            }
        }
    }

    #[test]
    fn split_children_respect_min_child_weight() {
        let (x, y) = xor(400, 12);
        let cfg = TrainConfig::default();
        let out = train(&x, &y, &x, &y, &cfg).unwrap();
        for t in out.ensemble.trees.iter().filter(|t| t.nodes.len() > 1) {
            assert!(t.leaves().all(|l| l.cover() >= cfg.min_child_weight));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let (x, y) = xor(200, 6);
        let cfg = TrainConfig {
            seed: 42,
            ..Default::default()
        };
        let a = train(&x, &y, &x, &y, &cfg).unwrap().ensemble.to_json();
        let b = train(&x, &y, &x, &y, &cfg).unwrap().ensemble.to_json();
        assert_eq!(a, b);
        let other = TrainConfig { seed: 43, ..cfg };
        assert_ne!(a, train(&x, &y, &x, &y, &other).unwrap().ensemble.to_json());
    }

    #[test]
    fn early_stopping_picks_best_prefix() {
        let (x, y) = xor(200, 7);
        let (vx, vy) = xor(100, 8);
        let out = train(&x, &y, &vx, &vy, &TrainConfig::default()).unwrap();
        let best = out.ensemble.best_round;
        let best_auc = out.log[best - 1].valid_auc;
        assert!(out.log.iter().all(|r| r.valid_auc <= best_auc));
        assert!(out.log.len() < 1000);
        assert_eq!(out.log.len(), out.ensemble.trees.len());
    }

    #[test]
    fn empty_and_stump_prediction() {
        let e = TreeEnsemble::constant(0.3, 2);
        assert_eq!(e.predict_proba(&[0.0, 0.0]).unwrap(), sigmoid(0.3));
        assert!(e.predict_margin(&[0.0]).is_err());

        let stump = Tree {
            nodes: vec![
                Node::Split {
                    feature: 1,
                    threshold: 0.5,
                    left: 1,
                    right: 2,
                    cover: 2.0,
                    grad: 0.0,
                    gain: 1.0,
                },
                Node::Leaf {
                    weight: -0.7,
                    cover: 1.0,
                    grad: 0.0,
                },
                Node::Leaf {
                    weight: 0.7,
                    cover: 1.0,
                    grad: 0.0,
                },
            ],
        };
        let mut e = TreeEnsemble::constant(0.3, 2);
        e.trees.push(stump);
        e.best_round = 1;
        assert_eq!(e.predict_proba(&[9.0, 0.0]).unwrap(), sigmoid(0.3 + -0.7));
        assert_eq!(e.predict_proba(&[9.0, 1.0]).unwrap(), sigmoid(0.3 + 0.7));
        // threshold ties go right
        assert_eq!(e.predict_margin(&[0.0, 0.5]).unwrap(), 0.3 + 0.7);
    }

    #[test]
    fn json_round_trip_and_errors() {
        let (x, y) = xor(150, 9);
        let e = train(&x, &y, &x, &y, &TrainConfig::default()).unwrap().ensemble;
        let back = TreeEnsemble::from_json(&e.to_json()).unwrap();
        assert_eq!(back, e);
        for r in x.rows() {
            assert_eq!(
                back.predict_margin(r).unwrap().to_bits(),
                e.predict_margin(r).unwrap().to_bits()
            );
        }
        let empty = TreeEnsemble::constant(-1.25, 3);
        assert_eq!(TreeEnsemble::from_json(&empty.to_json()).unwrap(), empty);

        let json = e.to_json();
        assert!(matches!(
            TreeEnsemble::from_json(&json[..json.len() / 2]),
            Err(BoostError::Corrupt(_))
        ));
        let bumped = json.replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(matches!(
            TreeEnsemble::from_json(&bumped),
            Err(BoostError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn batch_matches_row_prediction() {
        let (x, y) = xor(120, 10);
        let e = train(&x, &y, &x, &y, &TrainConfig::default()).unwrap().ensemble;
        let batch = e.predict_proba_batch(&x).unwrap();
        for (r, p) in x.rows().zip(batch) {
            assert_eq!(e.predict_proba(r).unwrap(), p);
        }
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                subsample: 1.5,
                ..Default::default()
            },
            TrainConfig {
                max_depth: 0,
                ..Default::default()
            },
            TrainConfig {
                alpha: -1.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn random_data_is_handled() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..80).map(|_| (0..5).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<u8> = (0..80).map(|i| (i % 3 == 0) as u8).collect();
        let x = FeatureMatrix::from_rows(&rows);
        let out = train(&x, &y, &x, &y, &TrainConfig::default()).unwrap();
        assert!(out.ensemble.best_round >= 1);
    }
}
