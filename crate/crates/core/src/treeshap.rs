//! Exact path-dependent Shapley values for tree ensembles, plus the
//! cross-validated mean-|SHAP| ranking used for feature selection.
//!
//! The valuation of a feature subset S is the cover-weighted conditional
//! expectation of the model: at a split on a feature in S follow `x`,
//! otherwise average both children by their training cover.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boost::{FeatureMatrix, Node, Tree, TreeEnsemble};

#[derive(Debug, Error, PartialEq)]
pub enum ShapError {
    #[error("model integrity: node {node} of tree {tree} has zero cover")]
    ZeroCover { tree: usize, node: usize },
    #[error("feature count mismatch: model has {expected}, row has {found}")]
    FeatureCountMismatch { expected: usize, found: usize },
    #[error("brute force supports at most {max} features, model has {found}")]
    TooManyFeatures { max: usize, found: usize },
    #[error("k = {k} exceeds the feature count {count}")]
    KTooLarge { k: usize, count: usize },
    #[error("{models} fold models but {data} fold data sets")]
    FoldMismatch { models: usize, data: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    /// Per-feature contributions in margin units.
    pub phi: Vec<f64>,
    /// Expected margin; `phi0 + sum(phi)` is the model margin.
    pub phi0: f64,
}

impl Attribution {
    pub fn total(&self) -> f64 {
        self.phi0 + self.phi.iter().sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug)]
struct PathElem {
    feature: usize,
    zero: f64,
    one: f64,
    weight: f64,
}

const NO_FEATURE: usize = usize::MAX;

fn extend(path: &mut Vec<PathElem>, zero: f64, one: f64, feature: usize) {
    let depth = path.len();
    path.push(PathElem {
        feature,
        zero,
        one,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let d1 = (depth + 1) as f64;
    for i in (0..depth).rev() {
        let wi = path[i].weight;
        path[i + 1].weight += one * wi * (i + 1) as f64 / d1;
        path[i].weight = zero * wi * (depth - i) as f64 / d1;
    }
}

fn unwind(path: &mut Vec<PathElem>, idx: usize) {
    let depth = path.len() - 1;
    let PathElem { zero, one, .. } = path[idx];
    let d1 = (depth + 1) as f64;
    let mut next = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * d1 / ((i + 1) as f64 * one);
            next = tmp - path[i].weight * zero * (depth - i) as f64 / d1;
        } else {
            path[i].weight = path[i].weight * d1 / (zero * (depth - i) as f64);
        }
    }
    for i in idx..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
    path.pop();
}

/// Sum of the path weights after unwinding element `idx`, without mutating.
fn unwound_sum(path: &[PathElem], idx: usize) -> f64 {
    let depth = path.len() - 1;
    let PathElem { zero, one, .. } = path[idx];
    let d1 = (depth + 1) as f64;
    let mut next = path[depth].weight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = next * d1 / ((i + 1) as f64 * one);
            total += tmp;
            next = path[i].weight - tmp * zero * (depth - i) as f64 / d1;
        } else if zero != 0.0 {
            total += path[i].weight / zero / ((depth - i) as f64 / d1);
        }
    }
    total
}

struct Walker<'a> {
    tree: &'a Tree,
    x: &'a [f64],
    phi: &'a mut [f64],
}

impl Walker<'_> {
    fn recurse(&mut self, node: usize, mut path: Vec<PathElem>, zero: f64, one: f64, feature: usize) {
        extend(&mut path, zero, one, feature);
        match self.tree.nodes[node] {
            Node::Leaf { weight, .. } => {
                for i in 1..path.len() {
                    let w = unwound_sum(&path, i);
                    let e = path[i];
                    self.phi[e.feature] += w * (e.one - e.zero) * weight;
                }
            }
            Node::Split {
                feature: f,
                threshold,
                left,
                right,
                cover,
                ..
            } => {
                let (hot, cold) = if self.x[f] < threshold { (left, right) } else { (right, left) };
                let hot_zero = self.tree.nodes[hot].cover() / cover;
                let cold_zero = self.tree.nodes[cold].cover() / cover;
                let (mut in_zero, mut in_one) = (1.0, 1.0);
                if let Some(k) = path.iter().position(|e| e.feature == f) {
                    in_zero = path[k].zero;
                    in_one = path[k].one;
                    unwind(&mut path, k);
                }
                self.recurse(hot, path.clone(), hot_zero * in_zero, in_one, f);
                self.recurse(cold, path, cold_zero * in_zero, 0.0, f);
            }
        }
    }
}

fn check_covers(trees: &[Tree]) -> Result<(), ShapError> {
    for (t, tree) in trees.iter().enumerate() {
        for (i, n) in tree.nodes.iter().enumerate() {
            if matches!(n, Node::Split { .. }) && !(n.cover() > 0.0) {
                return Err(ShapError::ZeroCover { tree: t, node: i });
            }
        }
    }
    Ok(())
}

/// Cover-weighted expected output of a tree.
pub fn expected_value(tree: &Tree) -> f64 {
    fn go(t: &Tree, i: usize) -> f64 {
        match t.nodes[i] {
            Node::Leaf { weight, .. } => weight,
            Node::Split {
                left, right, cover, ..
            } => (go(t, left) * t.nodes[left].cover() + go(t, right) * t.nodes[right].cover()) / cover,
        }
    }
    go(tree, 0)
}

fn check_row(e: &TreeEnsemble, x: &[f64]) -> Result<(), ShapError> {
    if x.len() != e.feature_count {
        return Err(ShapError::FeatureCountMismatch {
            expected: e.feature_count,
            found: x.len(),
        });
    }
    check_covers(e.active_trees())
}

fn shap_unchecked(e: &TreeEnsemble, x: &[f64]) -> Attribution {
    let mut phi = vec![0.0; e.feature_count];
    let mut phi0 = e.base_margin;
    for tree in e.active_trees() {
        phi0 += expected_value(tree);
        let mut w = Walker {
            tree,
            x,
            phi: &mut phi,
        };
        w.recurse(0, Vec::with_capacity(8), 1.0, 1.0, NO_FEATURE);
    }
    Attribution { phi, phi0 }
}

/// Exact Shapley values of one row, summed over the ensemble's active trees.
pub fn shap_values(e: &TreeEnsemble, x: &[f64]) -> Result<Attribution, ShapError> {
    check_row(e, x)?;
    Ok(shap_unchecked(e, x))
}

/// Attributions for every row of `x`, in row order.
pub fn shap_matrix(e: &TreeEnsemble, x: &FeatureMatrix) -> Result<Vec<Attribution>, ShapError> {
    if x.n_rows() > 0 {
        check_row(e, x.row(0))?;
    } else {
        check_covers(e.active_trees())?;
    }
    Ok((0..x.n_rows())
        .into_par_iter()
        .map(|i| shap_unchecked(e, x.row(i)))
        .collect())
}

/// Conditional expectation of a tree given the features in `known` (bitmask).
fn tree_value(t: &Tree, i: usize, x: &[f64], known: u32) -> f64 {
    match t.nodes[i] {
        Node::Leaf { weight, .. } => weight,
        Node::Split {
            feature,
            threshold,
            left,
            right,
            cover,
            ..
        } => {
            if known >> feature & 1 == 1 {
                tree_value(t, if x[feature] < threshold { left } else { right }, x, known)
            } else {
                (tree_value(t, left, x, known) * t.nodes[left].cover()
                    + tree_value(t, right, x, known) * t.nodes[right].cover())
                    / cover
            }
        }
    }
}

pub const BRUTE_FORCE_MAX_FEATURES: usize = 12;

/// Shapley values by enumerating all 2^M feature subsets.
pub fn brute_force_shap(e: &TreeEnsemble, x: &[f64]) -> Result<Attribution, ShapError> {
    check_row(e, x)?;
    let m = e.feature_count;
    if m > BRUTE_FORCE_MAX_FEATURES {
        return Err(ShapError::TooManyFeatures {
            max: BRUTE_FORCE_MAX_FEATURES,
            found: m,
        });
    }
    let value = |s: u32| -> f64 { e.active_trees().iter().map(|t| tree_value(t, 0, x, s)).sum() };
    let values: Vec<f64> = (0..1u32 << m).map(value).collect();
    let fact: Vec<f64> = (0..=m).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    })
    .collect();
    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        for s in 0..1u32 << m {
            if s >> i & 1 == 1 {
                continue;
            }
            let size = s.count_ones() as usize;
            let weight = fact[size] * fact[m - size - 1] / fact[m];
            *p += weight * (values[(s | 1 << i) as usize] - values[s as usize]);
        }
    }
    Ok(Attribution {
        phi,
        phi0: e.base_margin + values[0],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RankedFeature {
    pub name: String,
    pub mean_abs_shap: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FeatureRanking {
    /// Descending by `mean_abs_shap`.
    pub features: Vec<RankedFeature>,
    pub fold_count: usize,
}

impl FeatureRanking {
    pub fn top(&self, k: usize) -> Vec<String> {
        self.features.iter().take(k).map(|f| f.name.clone()).collect()
    }
}

/// Mean |phi| per feature over the rows of `x`. Each column is summed in
/// sorted order so the result does not depend on row order.
pub fn mean_abs_shap(e: &TreeEnsemble, x: &FeatureMatrix) -> Result<Vec<f64>, ShapError> {
    let attrs = shap_matrix(e, x)?;
    let n = attrs.len().max(1) as f64;
    Ok((0..e.feature_count)
        .map(|j| {
            let mut col: Vec<f64> = attrs.iter().map(|a| a.phi[j].abs()).collect();
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / n
        })
        .collect())
}

/// Averages per-fold mean |SHAP| over folds and keeps the top `k`; ties
/// keep the order of `names`.
pub fn rank_and_select(
    fold_models: &[TreeEnsemble],
    fold_data: &[FeatureMatrix],
    names: &[String],
    k: usize,
) -> Result<(FeatureRanking, Vec<String>), ShapError> {
    if fold_models.len() != fold_data.len() {
        return Err(ShapError::FoldMismatch {
            models: fold_models.len(),
            data: fold_data.len(),
        });
    }
    if k > names.len() {
        return Err(ShapError::KTooLarge { k, count: names.len() });
    }
    let mut totals = vec![0.0; names.len()];
    for (e, x) in fold_models.iter().zip(fold_data) {
        if e.feature_count != names.len() {
            return Err(ShapError::FeatureCountMismatch {
                expected: names.len(),
                found: e.feature_count,
            });
        }
        for (t, v) in totals.iter_mut().zip(mean_abs_shap(e, x)?) {
            *t += v;
        }
    }
    let folds = fold_models.len().max(1) as f64;
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]));
    let features: Vec<RankedFeature> = order
        .iter()
        .enumerate()
        .map(|(r, &i)| RankedFeature {
            name: names[i].clone(),
            mean_abs_shap: totals[i] / folds,
            rank: r + 1,
        })
        .collect();
    let ranking = FeatureRanking {
        features,
        fold_count: fold_models.len(),
    };
    let selected = ranking.top(k);
    Ok((ranking, selected))
}

pub fn write_ranking_csv<W: Write>(out: W, r: &FeatureRanking) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["name", "meanAbsShap", "rank"])?;
    for f in &r.features {
        w.write_record([f.name.clone(), format!("{:?}", f.mean_abs_shap), f.rank.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per patient: id, phi0, then one column per feature.
pub fn write_shap_matrix_csv<W: Write>(
    out: W,
    ids: &[String],
    names: &[String],
    attrs: &[Attribution],
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["patientId".to_string(), "phi0".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (id, a) in ids.iter().zip(attrs) {
        let mut rec = vec![id.clone(), format!("{:?}", a.phi0)];
        rec.extend(a.phi.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boost::{train, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A random tree whose covers are consistent (children sum to the parent).
    fn random_tree(rng: &mut ChaCha8Rng, m: usize, depth: usize) -> Tree {
        fn grow(rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>, m: usize, depth: usize, cover: f64) -> usize {
            let id = nodes.len();
            if depth == 0 || rng.random::<f64>() < 0.2 {
                nodes.push(Node::Leaf {
                    weight: rng.random_range(-1.0..1.0),
                    cover,
                    grad: 0.0,
                });
                return id;
            }
            nodes.push(Node::Leaf {
                weight: 0.0,
                cover,
                grad: 0.0,
            });
            let frac = rng.random_range(0.1..0.9);
            let feature = rng.random_range(0..m);
            let threshold = rng.random_range(-1.0..1.0);
            let left = grow(rng, nodes, m, depth - 1, cover * frac);
            let right = grow(rng, nodes, m, depth - 1, cover * (1.0 - frac));
            nodes[id] = Node::Split {
                feature,
                threshold,
                left,
                right,
                cover,
                grad: 0.0,
                gain: 1.0,
            };
            id
        }
        let mut nodes = Vec::new();
        let cover = rng.random_range(5.0..50.0);
        grow(rng, &mut nodes, m, depth, cover);
        Tree { nodes }
    }

    fn random_ensemble(rng: &mut ChaCha8Rng) -> TreeEnsemble {
        let m = rng.random_range(1..=6);
        let mut e = TreeEnsemble::constant(rng.random_range(-2.0..2.0), m);
        for _ in 0..rng.random_range(1..5) {
            let d = rng.random_range(1..=3);
            e.trees.push(random_tree(rng, m, d));
        }
        e.best_round = e.trees.len();
        e
    }

    #[test]
    fn matches_brute_force_on_random_ensembles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..200 {
            let e = random_ensemble(&mut rng);
            let x: Vec<f64> = (0..e.feature_count).map(|_| rng.random_range(-1.2..1.2)).collect();
            let fast = shap_values(&e, &x).unwrap();
            let slow = brute_force_shap(&e, &x).unwrap();
            assert!((fast.phi0 - slow.phi0).abs() <= 1e-9);
            for (a, b) in fast.phi.iter().zip(&slow.phi) {
                assert!((a - b).abs() <= 1e-9, "{:?} vs {:?}", fast.phi, slow.phi);
            }
            let margin = e.predict_margin(&x).unwrap();
            assert!((fast.total() - margin).abs() <= 1e-9);
        }
    }

    #[test]
    fn empty_ensemble_is_all_zero() {
        let e = TreeEnsemble::constant(0.7, 3);
        let a = shap_values(&e, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a.phi, vec![0.0; 3]);
        assert_eq!(a.phi0, 0.7);
        assert_eq!(brute_force_shap(&e, &[1.0, 2.0, 3.0]).unwrap(), a);
    }

    #[test]
    fn stump_attributes_only_its_feature() {
        let mut e = TreeEnsemble::constant(0.1, 3);
        e.trees.push(Tree {
            nodes: vec![
                Node::Split {
                    feature: 2,
                    threshold: 0.0,
                    left: 1,
                    right: 2,
                    cover: 4.0,
                    grad: 0.0,
                    gain: 1.0,
                },
                Node::Leaf {
                    weight: -1.0,
                    cover: 1.0,
                    grad: 0.0,
                },
                Node::Leaf {
                    weight: 2.0,
                    cover: 3.0,
                    grad: 0.0,
                },
            ],
        });
        e.best_round = 1;
        let x = [5.0, -5.0, -1.0];
        let a = shap_values(&e, &x).unwrap();
        assert_eq!(a.phi[0], 0.0);
        assert_eq!(a.phi[1], 0.0);
        assert!((a.phi[2] - (e.predict_margin(&x).unwrap() - a.phi0)).abs() < 1e-15);
        assert!((a.phi0 - (0.1 + 1.25)).abs() < 1e-15);
    }

    #[test]
    fn duplicated_features_share_credit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let v: f64 = rng.random_range(-1.0..1.0);
                vec![v, v, rng.random_range(-1.0..1.0)]
            })
            .collect();
        let y: Vec<u8> = rows.iter().map(|r| (r[0] + 0.3 * r[2] > 0.0) as u8).collect();
        let x = FeatureMatrix::from_rows(&rows);
        let mut e = train(&x, &y, &x, &y, &TrainConfig::default()).unwrap().ensemble;
        // mirror every split on feature 0 into a symmetric pair of trees
        let mut mirrored = Vec::new();
        for t in e.active_trees() {
            let mut t2 = t.clone();
            for n in &mut t2.nodes {
                if let Node::Split { feature, .. } = n {
                    if *feature == 0 {
                        *feature = 1;
                    } else if *feature == 1 {
                        *feature = 0;
                    }
                }
            }
            mirrored.push(t.clone());
            mirrored.push(t2);
        }
        e.best_round = mirrored.len();
        e.trees = mirrored;
        for r in rows.iter().take(20) {
            let a = shap_values(&e, r).unwrap();
            assert!((a.phi[0] - a.phi[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn unused_feature_gets_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut e = random_ensemble(&mut rng);
            e.feature_count += 1;
            let x: Vec<f64> = (0..e.feature_count).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_eq!(shap_values(&e, &x).unwrap().phi[e.feature_count - 1], 0.0);
        }
    }

    #[test]
    fn zero_cover_is_an_integrity_error() {
        let mut e = TreeEnsemble::constant(0.0, 1);
        e.trees.push(Tree {
            nodes: vec![
                Node::Split {
                    feature: 0,
                    threshold: 0.0,
                    left: 1,
                    right: 2,
                    cover: 0.0,
                    grad: 0.0,
                    gain: 1.0,
                },
                Node::Leaf {
                    weight: 1.0,
                    cover: 0.0,
                    grad: 0.0,
                },
                Node::Leaf {
                    weight: 1.0,
                    cover: 0.0,
                    grad: 0.0,
                },
            ],
        });
        e.best_round = 1;
        assert_eq!(shap_values(&e, &[0.0]), Err(ShapError::ZeroCover { tree: 0, node: 0 }));
    }

    fn single_feature_model(m: usize, j: usize) -> TreeEnsemble {
        let mut e = TreeEnsemble::constant(0.0, m);
        e.trees.push(Tree {
            nodes: vec![
                Node::Split {
                    feature: j,
                    threshold: 0.5,
                    left: 1,
                    right: 2,
                    cover: 10.0,
                    grad: 0.0,
                    gain: 1.0,
                },
                Node::Leaf {
                    weight: -1.0,
                    cover: 5.0,
                    grad: 0.0,
                },
                Node::Leaf {
                    weight: 1.0,
                    cover: 5.0,
                    grad: 0.0,
                },
            ],
        });
        e.best_round = 1;
        e
    }

    #[test]
    fn ranking_and_selection() {
        let names: Vec<String> = (0..4).map(|i| format!("f{i}")).collect();
        let e = single_feature_model(4, 2);
        let x = FeatureMatrix::from_rows(&[vec![0.0, 1.0, 0.0, 1.0], vec![1.0, 0.0, 1.0, 0.0]]);
        let (ranking, top) = rank_and_select(&[e.clone(), e.clone()], &[x.clone(), x.clone()], &names, 4).unwrap();
        assert_eq!(top[0], "f2");
        assert_eq!(top, vec!["f2", "f0", "f1", "f3"]);
        assert_eq!(ranking.fold_count, 2);
        assert!(ranking.features.windows(2).all(|w| w[0].mean_abs_shap >= w[1].mean_abs_shap));
        assert!(matches!(
            rank_and_select(&[e], &[x], &names, 5),
            Err(ShapError::KTooLarge { .. })
        ));
    }

    #[test]
    fn ranking_ignores_row_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..150).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<u8> = rows.iter().map(|r| (r[0] - r[3] + 0.2 * r[1] > 0.0) as u8).collect();
        let x = FeatureMatrix::from_rows(&rows);
        let e = train(&x, &y, &x, &y, &TrainConfig::default()).unwrap().ensemble;
        let names: Vec<String> = (0..5).map(|i| format!("f{i}")).collect();
        let mut perm: Vec<usize> = (0..rows.len()).collect();
        perm.reverse();
        perm.rotate_left(37);
        let xp = x.select_rows(&perm);
        let a = rank_and_select(&[e.clone()], &[x], &names, 3).unwrap();
        let b = rank_and_select(&[e], &[xp], &names, 3).unwrap();
        assert_eq!(a, b);
    }
}
