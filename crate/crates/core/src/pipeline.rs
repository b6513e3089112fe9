//! Cross-validated evaluation of the three model scopes.
//!
//! Every fitted artifact (mass-histogram edges, SHAP selection, boosted
//! model) carries the training rows it was fitted on, and is checked against
//! the held-out fold before use.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boost::{self, BoostError, FeatureMatrix, TrainConfig, TreeEnsemble};
use crate::calciomics::{
    mass_hist_name, FeatureError, FeatureTable, FitProvenance, HistogramSpec, LesionRecord, AGATSTON_FEATURE,
    CLINICAL_FEATURES, MASS_HIST_BINS,
};
use crate::statlab::{self, ClassificationMetrics, PairedAucTest, StatError, TestResult};
use crate::treeshap::{self, FeatureRanking, ShapError};
use crate::util::{fmt_f64, mix_seed, sha256_hex};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("leakage: {artifact} fitted on rows that include held-out fold {fold}")]
    Leakage { artifact: String, fold: String },
    #[error("runs use different fold assignments or patients")]
    FoldMismatch,
    #[error(transparent)]
    Boost(#[from] BoostError),
    #[error(transparent)]
    Shap(#[from] ShapError),
    #[error(transparent)]
    Stat(#[from] StatError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub k: usize,
    pub repeats: usize,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            k: 5,
            repeats: 1,
            stratified: true,
            seed: 0,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k < 2 {
            return Err(PipelineError::InvalidConfig(format!("k must be >= 2, got {}", self.k)));
        }
        if self.repeats < 1 {
            return Err(PipelineError::InvalidConfig("repeats must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fold index per row for one repeat.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: Vec<usize>,
    /// Folds that hold a single class (unstratified mode only).
    pub warnings: Vec<String>,
}

impl FoldAssignment {
    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }
}

/// Random k-fold assignment. Stratified mode deals each shuffled class
/// round-robin, continuing the fold cursor from one class to the next, so
/// fold sizes and per-class counts each differ by at most one.
pub fn kfold_split(labels: &[u8], k: usize, stratified: bool, seed: u64) -> Result<FoldAssignment, PipelineError> {
    let n = labels.len();
    if k < 2 {
        return Err(PipelineError::InvalidConfig(format!("k must be >= 2, got {k}")));
    }
    if n < k {
        return Err(PipelineError::InvalidData(format!("{n} rows cannot fill {k} folds")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(PipelineError::InvalidData(format!("label {l} is not 0/1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0; n];
    let mut warnings = Vec::new();
    if stratified {
        let positives = labels.iter().filter(|&&l| l == 1).count();
        if positives < k || n - positives < k {
            return Err(PipelineError::InvalidData(format!(
                "stratified {k}-fold split needs at least {k} rows of each class, got {positives} positive of {n}"
            )));
        }
        let mut cursor = 0;
        for class in [0u8, 1] {
            let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
            idx.shuffle(&mut rng);
            for i in idx {
                fold_of[i] = cursor % k;
                cursor += 1;
            }
        }
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            fold_of[i] = pos % k;
        }
        for f in 0..k {
            let pos = (0..n).filter(|&i| fold_of[i] == f && labels[i] == 1).count();
            let size = (0..n).filter(|&i| fold_of[i] == f).count();
            if pos == 0 || pos == size {
                warnings.push(format!("fold {f} holds a single class"));
            }
        }
    }
    Ok(FoldAssignment { k, fold_of, warnings })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelId {
    M1,
    M2,
    M3,
}

impl ModelId {
    pub const ALL: [ModelId; 3] = [ModelId::M1, ModelId::M2, ModelId::M3];
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelId::M1 => "M1",
            ModelId::M2 => "M2",
            ModelId::M3 => "M3",
        })
    }
}

impl FromStr for ModelId {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(ModelId::M1),
            "m2" => Ok(ModelId::M2),
            "m3" => Ok(ModelId::M3),
            _ => Err(PipelineError::InvalidConfig(format!("unknown model {s:?}; expected m1, m2 or m3"))),
        }
    }
}

/// Feature scope of a model. M1: clinical variables. M2: M1 plus the
/// Agatston score. M3: M2 plus the SHAP top-k of all columns, chosen on
/// training rows only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct ModelSpec {
    pub id: ModelId,
    pub top_k: usize,
    /// Inner folds used to rank features for M3.
    pub selection_folds: usize,
    /// Operating point for the threshold metrics.
    pub threshold: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            id: ModelId::M1,
            top_k: 10,
            selection_folds: 5,
            threshold: 0.5,
        }
    }
}

impl ModelSpec {
    pub fn new(id: ModelId) -> Self {
        Self { id, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.top_k == 0 {
            return Err(PipelineError::InvalidConfig("top_k must be >= 1".into()));
        }
        if self.selection_folds < 2 {
            return Err(PipelineError::InvalidConfig("selection_folds must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(PipelineError::InvalidConfig(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    /// Columns every run of this scope uses before selection.
    pub fn fixed_features(&self) -> Vec<String> {
        let mut v: Vec<String> = CLINICAL_FEATURES.iter().map(|s| s.to_string()).collect();
        if self.id != ModelId::M1 {
            v.push(AGATSTON_FEATURE.to_string());
        }
        v
    }
}

/// A feature table with rows in patient-id order and, optionally, the
/// per-lesion masses needed to refit the mass histogram inside each fold.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub patient_ids: Vec<String>,
    pub labels: Vec<u8>,
    pub x: FeatureMatrix,
    pub lesion_masses: Option<Vec<Vec<f64>>>,
    pub registry_hash: Option<String>,
}

impl Dataset {
    pub fn from_table(table: &FeatureTable, lesions: Option<&[LesionRecord]>) -> Result<Self, PipelineError> {
        if table.rows.is_empty() {
            return Err(PipelineError::InvalidData("feature table has no rows".into()));
        }
        let mut rows: Vec<_> = table.rows.iter().collect();
        rows.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        for w in rows.windows(2) {
            if w[0].patient_id == w[1].patient_id {
                return Err(PipelineError::InvalidData(format!("duplicate patient {}", w[0].patient_id)));
            }
        }
        let mut data = Vec::with_capacity(rows.len() * table.names.len());
        for r in &rows {
            if r.values.len() != table.names.len() {
                return Err(PipelineError::InvalidData(format!("row {} has the wrong width", r.patient_id)));
            }
            if let Some(j) = r.values.iter().position(|v| !v.is_finite()) {
                return Err(PipelineError::InvalidData(format!(
                    "non-finite {} for patient {}",
                    table.names[j], r.patient_id
                )));
            }
            data.extend_from_slice(&r.values);
        }
        let patient_ids: Vec<String> = rows.iter().map(|r| r.patient_id.clone()).collect();
        let lesion_masses = match lesions {
            None => None,
            Some(recs) => {
                let pos: BTreeMap<&str, usize> =
                    patient_ids.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
                let mut masses = vec![Vec::new(); patient_ids.len()];
                for r in recs {
                    let Some(&i) = pos.get(r.patient_id.as_str()) else {
                        return Err(PipelineError::InvalidData(format!(
                            "lesion table names unknown patient {}",
                            r.patient_id
                        )));
                    };
                    masses[i].push(r.mass_score);
                }
                Some(masses)
            }
        };
        Ok(Self {
            names: table.names.clone(),
            labels: rows.iter().map(|r| r.label).collect(),
            patient_ids,
            x: FeatureMatrix::new(rows.len(), table.names.len(), data),
            lesion_masses,
            registry_hash: table.registry_hash.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn column(&self, name: &str) -> Result<usize, PipelineError> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| PipelineError::MissingColumn(name.to_string()))
    }

    fn mass_hist_columns(&self) -> Option<Vec<usize>> {
        (0..MASS_HIST_BINS).map(|b| self.column(&mass_hist_name(b)).ok()).collect()
    }

    /// Copy of the matrix whose mass-histogram columns are recomputed with
    /// edges fitted on `train_rows`. Returns the fitted spec, or `None` when
    /// there is nothing to refit.
    fn refit_mass_hist(
        &self,
        train_rows: &[usize],
        label: &str,
    ) -> Result<(FeatureMatrix, Option<HistogramSpec>), PipelineError> {
        let (Some(masses), Some(cols)) = (&self.lesion_masses, self.mass_hist_columns()) else {
            return Ok((self.x.clone(), None));
        };
        let pooled: Vec<f64> = train_rows.iter().flat_map(|&i| masses[i].iter().copied()).collect();
        if pooled.is_empty() {
            return Ok((self.x.clone(), None));
        }
        let spec = HistogramSpec::fit(&pooled, FitProvenance::new(label, train_rows.to_vec()))?;
        let n_cols = self.x.n_cols();
        let mut data = Vec::with_capacity(self.len() * n_cols);
        for i in 0..self.len() {
            let mut row = self.x.row(i).to_vec();
            let counts = crate::calciomics::mass_hist(&masses[i], &spec);
            for (b, &c) in cols.iter().enumerate() {
                row[c] = counts[b] as f64;
            }
            data.extend(row);
        }
        Ok((FeatureMatrix::new(self.len(), n_cols, data), Some(spec)))
    }

    fn fingerprint(&self, rows: &[usize]) -> String {
        let mut ids: Vec<&str> = rows.iter().map(|&i| self.patient_ids[i].as_str()).collect();
        ids.sort_unstable();
        sha256_hex(ids.join("\n").as_bytes())
    }
}

/// Fails when `prov` was fitted on any of `held_out`.
pub fn check_disjoint(artifact: &str, prov: &FitProvenance, held_out: &[usize]) -> Result<(), PipelineError> {
    if prov.overlaps(held_out) {
        return Err(PipelineError::Leakage {
            artifact: artifact.to_string(),
            fold: prov.label.clone(),
        });
    }
    Ok(())
}

/// Splits training rows into fit and early-stopping rows: after a seeded
/// shuffle, the last 20% of each class is held back.
pub fn early_stopping_split(rows: &[usize], labels: &[u8], seed: u64) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = rows.to_vec();
    shuffled.shuffle(&mut rng);
    let (mut fit, mut valid) = (Vec::new(), Vec::new());
    for class in [0u8, 1] {
        let idx: Vec<usize> = shuffled.iter().copied().filter(|&i| labels[i] == class).collect();
        if idx.len() < 2 {
            return Err(PipelineError::InvalidData(format!(
                "training rows hold {} of class {class}; early stopping needs two",
                idx.len()
            )));
        }
        let n_valid = ((idx.len() as f64 * 0.2).round() as usize).clamp(1, idx.len() - 1);
        let cut = idx.len() - n_valid;
        fit.extend_from_slice(&idx[..cut]);
        valid.extend_from_slice(&idx[cut..]);
    }
    fit.sort_unstable();
    valid.sort_unstable();
    Ok((fit, valid))
}

fn labels_of(labels: &[u8], rows: &[usize]) -> Vec<u8> {
    rows.iter().map(|&i| labels[i]).collect()
}

/// Trains on `rows` of `x` (all columns) with an inner early-stopping split.
fn fit_model(
    x: &FeatureMatrix,
    labels: &[u8],
    rows: &[usize],
    names: &[String],
    cfg: &TrainConfig,
) -> Result<TreeEnsemble, PipelineError> {
    let (fit, valid) = early_stopping_split(rows, labels, cfg.seed)?;
    let out = boost::train(
        &x.select_rows(&fit),
        &labels_of(labels, &fit),
        &x.select_rows(&valid),
        &labels_of(labels, &valid),
        cfg,
    )?;
    Ok(out.ensemble.with_feature_names(names.to_vec())?)
}

/// Ranks every column by mean |SHAP| over an inner k-fold of `rows` and
/// returns the ranking with the top-k names.
pub fn shap_select(
    x: &FeatureMatrix,
    labels: &[u8],
    rows: &[usize],
    names: &[String],
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<(FeatureRanking, Vec<String>), PipelineError> {
    let inner_labels = labels_of(labels, rows);
    let inner = kfold_split(&inner_labels, spec.selection_folds, true, mix_seed(&[cfg.seed, 1]))?;
    let parts: Vec<(TreeEnsemble, FeatureMatrix)> = (0..inner.k)
        .into_par_iter()
        .map(|f| {
            let tr: Vec<usize> = inner.train_rows(f).iter().map(|&i| rows[i]).collect();
            let te: Vec<usize> = inner.test_rows(f).iter().map(|&i| rows[i]).collect();
            let fold_cfg = TrainConfig {
                seed: mix_seed(&[cfg.seed, 2, f as u64]),
                ..*cfg
            };
            let model = fit_model(x, labels, &tr, names, &fold_cfg)?;
            Ok((model, x.select_rows(&te)))
        })
        .collect::<Result<_, PipelineError>>()?;
    let (models, data): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let k = spec.top_k.min(names.len());
    Ok(treeshap::rank_and_select(&models, &data, names, k)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FoldMetrics {
    /// Undefined when the held-out fold holds a single class.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub classification: ClassificationMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct FoldResult {
    pub repeat: usize,
    pub fold: usize,
    /// SHA-256 of the sorted training patient ids.
    pub train_fingerprint: String,
    pub n_train: usize,
    pub n_test: usize,
    pub test_positives: usize,
    pub features: Vec<String>,
    pub mass_hist_edges: Option<Vec<f64>>,
    pub best_round: usize,
    pub metrics: FoldMetrics,
    #[serde(skip)]
    pub model: TreeEnsemble,
    #[serde(skip)]
    pub ranking: Option<FeatureRanking>,
    /// (row, score) for every held-out row.
    #[serde(skip)]
    pub scores: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricStat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
    /// Per-fold values in (repeat, fold) order; `None` where undefined.
    pub values: Vec<Option<f64>>,
}

impl MetricStat {
    fn from_values(values: Vec<Option<f64>>) -> Self {
        let v: Vec<f64> = values.iter().flatten().copied().collect();
        let n = v.len() as f64;
        let mean = if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / n };
        let sd = if v.len() < 2 {
            0.0
        } else {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, sd, values }
    }
}

pub const METRIC_NAMES: [&str; 7] = ["auroc", "auprc", "precision", "sensitivity", "specificity", "accuracy", "f1"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsSummary {
    pub metrics: BTreeMap<String, MetricStat>,
    pub fold_count: usize,
    /// AUROC and AUPRC are computed per fold and averaged.
    pub auc_mode: String,
    /// Folds where nothing was predicted positive (precision set to 0).
    pub precision_undefined_folds: usize,
}

impl MetricsSummary {
    pub fn from_folds(folds: &[FoldResult]) -> Self {
        let mut metrics = BTreeMap::new();
        for name in METRIC_NAMES {
            let values = folds
                .iter()
                .map(|f| {
                    let c = &f.metrics.classification;
                    match name {
                        "auroc" => f.metrics.auroc,
                        "auprc" => f.metrics.auprc,
                        "precision" => Some(c.precision),
                        "sensitivity" => Some(c.sensitivity),
                        "specificity" => Some(c.specificity),
                        "accuracy" => Some(c.accuracy),
                        _ => Some(c.f1),
                    }
                })
                .collect();
            metrics.insert(name.to_string(), MetricStat::from_values(values));
        }
        Self {
            metrics,
            fold_count: folds.len(),
            auc_mode: "averaged".into(),
            precision_undefined_folds: folds
                .iter()
                .filter(|f| !f.metrics.classification.precision_defined)
                .count(),
        }
    }

    pub fn get(&self, name: &str) -> &MetricStat {
        &self.metrics[name]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRun {
    pub spec: ModelSpec,
    pub cv: CvConfig,
    pub train: TrainConfig,
    pub patient_ids: Vec<String>,
    pub labels: Vec<u8>,
    pub assignments: Vec<FoldAssignment>,
    pub folds: Vec<FoldResult>,
    /// Out-of-fold score per patient, averaged over repeats.
    pub oof: Vec<f64>,
    pub summary: MetricsSummary,
    /// M3 only: ranking and selection on all rows, for reporting.
    pub full_selection: Option<(FeatureRanking, Vec<String>)>,
    pub registry_hash: Option<String>,
}

fn run_fold(
    data: &Dataset,
    spec: &ModelSpec,
    train_cfg: &TrainConfig,
    assign: &FoldAssignment,
    repeat: usize,
    fold: usize,
    seed: u64,
) -> Result<FoldResult, PipelineError> {
    let train_rows = assign.train_rows(fold);
    let test_rows = assign.test_rows(fold);
    let label = format!("repeat {repeat} fold {fold}");
    let (x, hist) = data.refit_mass_hist(&train_rows, &label)?;
    if let Some(h) = &hist {
        check_disjoint("mass histogram", &h.fitted_on, &test_rows)?;
    }
    let cfg = TrainConfig {
        seed: mix_seed(&[train_cfg.seed, seed, repeat as u64, fold as u64]),
        ..*train_cfg
    };
    let mut features = spec.fixed_features();
    let mut ranking = None;
    if spec.id == ModelId::M3 {
        let (r, top) = shap_select(&x, &data.labels, &train_rows, &data.names, spec, &cfg)?;
        check_disjoint("feature selection", &FitProvenance::new(&label, train_rows.clone()), &test_rows)?;
        for f in top {
            if !features.contains(&f) {
                features.push(f);
            }
        }
        ranking = Some(r);
    }
    let cols = features
        .iter()
        .map(|f| data.column(f))
        .collect::<Result<Vec<_>, _>>()?;
    let xs = x.select_cols(&cols);
    let model = fit_model(&xs, &data.labels, &train_rows, &features, &cfg)?;
    check_disjoint("model", &FitProvenance::new(&label, train_rows.clone()), &test_rows)?;
    let proba = model.predict_proba_batch(&xs.select_rows(&test_rows))?;
    let y = labels_of(&data.labels, &test_rows);
    let both = y.contains(&0) && y.contains(&1);
    let metrics = FoldMetrics {
        auroc: if both { Some(statlab::auroc(&proba, &y)?) } else { None },
        auprc: if both { Some(statlab::auprc(&proba, &y)?) } else { None },
        classification: statlab::classification_metrics(&proba, &y, spec.threshold)?,
    };
    Ok(FoldResult {
        repeat,
        fold,
        train_fingerprint: data.fingerprint(&train_rows),
        n_train: train_rows.len(),
        n_test: test_rows.len(),
        test_positives: y.iter().filter(|&&l| l == 1).count(),
        features,
        mass_hist_edges: hist.map(|h| h.edges()[1..MASS_HIST_BINS].to_vec()),
        best_round: model.best_round,
        metrics,
        model,
        ranking,
        scores: test_rows.into_iter().zip(proba).collect(),
    })
}

/// Runs repeated k-fold cross-validation of one model scope.
pub fn run_experiment(
    data: &Dataset,
    spec: &ModelSpec,
    cv: &CvConfig,
    train_cfg: &TrainConfig,
) -> Result<ExperimentRun, PipelineError> {
    cv.validate()?;
    spec.validate()?;
    train_cfg.validate()?;
    for f in spec.fixed_features() {
        data.column(&f)?;
    }
    let assignments = (0..cv.repeats)
        .map(|r| kfold_split(&data.labels, cv.k, cv.stratified, mix_seed(&[cv.seed, r as u64])))
        .collect::<Result<Vec<_>, _>>()?;
    let units: Vec<(usize, usize)> = (0..cv.repeats).flat_map(|r| (0..cv.k).map(move |f| (r, f))).collect();
    let folds: Vec<FoldResult> = units
        .par_iter()
        .map(|&(r, f)| run_fold(data, spec, train_cfg, &assignments[r], r, f, cv.seed))
        .collect::<Result<_, _>>()?;
    let mut sum = vec![0.0; data.len()];
    for f in &folds {
        for &(i, s) in &f.scores {
            sum[i] += s;
        }
    }
    let oof = sum.iter().map(|s| s / cv.repeats as f64).collect();
    let full_selection = if spec.id == ModelId::M3 {
        let all: Vec<usize> = (0..data.len()).collect();
        let (x, _) = data.refit_mass_hist(&all, "all rows")?;
        let cfg = TrainConfig {
            seed: mix_seed(&[train_cfg.seed, cv.seed, u64::MAX]),
            ..*train_cfg
        };
        Some(shap_select(&x, &data.labels, &all, &data.names, spec, &cfg)?)
    } else {
        None
    };
    Ok(ExperimentRun {
        spec: *spec,
        cv: *cv,
        train: *train_cfg,
        patient_ids: data.patient_ids.clone(),
        labels: data.labels.clone(),
        summary: MetricsSummary::from_folds(&folds),
        assignments,
        folds,
        oof,
        full_selection,
        registry_hash: data.registry_hash.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Comparison {
    pub model_a: String,
    pub model_b: String,
    /// DeLong on the pooled out-of-fold scores.
    pub delong: PairedAucTest,
    /// Paired bootstrap on AUPRC.
    pub auprc: PairedAucTest,
    /// McNemar (continuity-corrected) on thresholded predictions.
    pub mcnemar: TestResult,
    pub discordant: (u64, u64),
}

pub const AUPRC_BOOTSTRAP_REPLICATES: usize = 2000;

pub fn compare_models(a: &ExperimentRun, b: &ExperimentRun) -> Result<Comparison, PipelineError> {
    if a.patient_ids != b.patient_ids || a.labels != b.labels || a.assignments != b.assignments {
        return Err(PipelineError::FoldMismatch);
    }
    let delong = statlab::delong_test(&a.oof, &b.oof, &a.labels)?;
    // the seed is symmetric in the pair so swapping arguments only flips signs
    let (lo, hi) = if a.spec.id <= b.spec.id { (a, b) } else { (b, a) };
    let seed = mix_seed(&[a.cv.seed, lo.spec.id as u64, hi.spec.id as u64]);
    let auprc = statlab::bootstrap_auprc_test(&a.oof, &b.oof, &a.labels, AUPRC_BOOTSTRAP_REPLICATES, seed)?;
    let threshold = a.spec.threshold;
    let (db, dc) = statlab::discordant_counts(&a.oof, &b.oof, &a.labels, threshold);
    Ok(Comparison {
        model_a: a.spec.id.to_string(),
        model_b: b.spec.id.to_string(),
        delong,
        auprc,
        mcnemar: statlab::mcnemar(db, dc, true),
        discordant: (db, dc),
    })
}

// ---------------------------------------------------------------------------
// Report

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RegressionRow {
    pub analysis: String,
    pub term: String,
    pub odds_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p: f64,
    pub coefficient: f64,
    pub std_error: f64,
    pub status: String,
}

/// Univariable logistic regression for each feature, then a multivariable
/// model over those with p < 0.05.
pub fn regression_table(data: &Dataset, features: &[String]) -> Result<Vec<RegressionRow>, PipelineError> {
    let cfg = statlab::LogisticConfig::default();
    let mut rows = Vec::new();
    let mut significant = Vec::new();
    let failed = |analysis: &str, term: &str, e: &StatError| RegressionRow {
        analysis: analysis.into(),
        term: term.into(),
        odds_ratio: f64::NAN,
        ci_low: f64::NAN,
        ci_high: f64::NAN,
        p: f64::NAN,
        coefficient: f64::NAN,
        std_error: f64::NAN,
        status: e.to_string(),
    };
    let column = |name: &str| -> Result<Vec<f64>, PipelineError> {
        let j = data.column(name)?;
        Ok((0..data.len()).map(|i| data.x.get(i, j)).collect())
    };
    for f in features {
        let col = column(f)?;
        match statlab::logistic_fit(&[col], &data.labels, &[f.as_str()], &cfg) {
            Ok(r) => {
                let t = r.term(f).expect("fitted term");
                if t.p_wald < 0.05 {
                    significant.push(f.clone());
                }
                rows.push(term_row("univariable", t));
            }
            Err(e) => rows.push(failed("univariable", f, &e)),
        }
    }
    if significant.len() >= 2 {
        let cols = significant.iter().map(|f| column(f)).collect::<Result<Vec<_>, _>>()?;
        match statlab::logistic_fit(&cols, &data.labels, &significant, &cfg) {
            Ok(r) => {
                for f in &significant {
                    rows.push(term_row("multivariable", r.term(f).expect("fitted term")));
                }
            }
            Err(e) => rows.push(failed("multivariable", "*", &e)),
        }
    }
    Ok(rows)
}

fn term_row(analysis: &str, t: &statlab::TermEstimate) -> RegressionRow {
    RegressionRow {
        analysis: analysis.into(),
        term: t.term.clone(),
        odds_ratio: t.odds_ratio,
        ci_low: t.ci_low,
        ci_high: t.ci_high,
        p: t.p_wald,
        coefficient: t.coefficient,
        std_error: t.std_error,
        status: "ok".into(),
    }
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| PipelineError::Io(e.into_error()))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ReportManifest {
    pub models: Vec<String>,
    pub cv: CvConfig,
    pub train: TrainConfig,
    pub model_specs: Vec<ModelSpec>,
    pub registry_hash: Option<String>,
    pub patients: usize,
    pub positives: usize,
    pub dataset_hash: String,
    /// Fold index per patient (in patient-id order), one list per repeat.
    pub fold_assignments: Vec<Vec<usize>>,
    pub fold_warnings: Vec<String>,
    pub summaries: BTreeMap<String, MetricsSummary>,
    pub folds: BTreeMap<String, Vec<FoldResult>>,
    /// SHA-256 of every other file in the bundle.
    pub files: BTreeMap<String, String>,
}

/// Writes the report bundle for `runs` into `dir`. All runs must share
/// patients and fold assignments. Output is a pure function of the inputs.
pub fn emit_report(dir: &Path, data: &Dataset, runs: &[ExperimentRun]) -> Result<ReportManifest, PipelineError> {
    let Some(first) = runs.first() else {
        return Err(PipelineError::InvalidData("no runs to report".into()));
    };
    for r in runs {
        if r.patient_ids != first.patient_ids || r.assignments != first.assignments {
            return Err(PipelineError::FoldMismatch);
        }
    }
    if data.patient_ids != first.patient_ids {
        return Err(PipelineError::FoldMismatch);
    }
    std::fs::create_dir_all(dir.join("models"))?;
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();

    let mut header = vec!["model".to_string()];
    for m in METRIC_NAMES {
        header.push(format!("{m}Mean"));
        header.push(format!("{m}Sd"));
    }
    header.push("folds".into());
    let table2 = csv_bytes(
        &header.iter().map(String::as_str).collect::<Vec<_>>(),
        runs.iter().map(|r| {
            let mut rec = vec![r.spec.id.to_string()];
            for m in METRIC_NAMES {
                let s = r.summary.get(m);
                rec.push(fmt_f64(s.mean));
                rec.push(fmt_f64(s.sd));
            }
            rec.push(r.summary.fold_count.to_string());
            rec
        }),
    )?;
    files.insert("table2.csv".into(), table2);

    let folds_csv = csv_bytes(
        &[
            "model", "repeat", "fold", "nTrain", "nTest", "testPositives", "bestRound", "auroc", "auprc", "tp", "fp",
            "fn", "tn", "precision", "precisionDefined", "sensitivity", "specificity", "accuracy", "f1", "features",
        ],
        runs.iter().flat_map(|r| {
            r.folds.iter().map(move |f| {
                let c = &f.metrics.classification;
                vec![
                    r.spec.id.to_string(),
                    f.repeat.to_string(),
                    f.fold.to_string(),
                    f.n_train.to_string(),
                    f.n_test.to_string(),
                    f.test_positives.to_string(),
                    f.best_round.to_string(),
                    opt(f.metrics.auroc),
                    opt(f.metrics.auprc),
                    c.tp.to_string(),
                    c.fp.to_string(),
                    c.fn_.to_string(),
                    c.tn.to_string(),
                    fmt_f64(c.precision),
                    c.precision_defined.to_string(),
                    fmt_f64(c.sensitivity),
                    fmt_f64(c.specificity),
                    fmt_f64(c.accuracy),
                    fmt_f64(c.f1),
                    f.features.join(";"),
                ]
            })
        }),
    )?;
    files.insert("folds.csv".into(), folds_csv);

    for r in runs {
        let id = r.spec.id;
        let mut roc = Vec::new();
        statlab::write_curve_csv(&mut roc, "fpr", "tpr", &statlab::roc_curve(&r.oof, &r.labels)?)?;
        files.insert(format!("roc_{id}.csv"), roc);
        let mut pr = Vec::new();
        statlab::write_curve_csv(&mut pr, "recall", "precision", &statlab::pr_curve(&r.oof, &r.labels)?)?;
        files.insert(format!("pr_{id}.csv"), pr);
        let oof = csv_bytes(
            &["patientId", "label", "score"],
            (0..r.labels.len()).map(|i| vec![r.patient_ids[i].clone(), r.labels[i].to_string(), fmt_f64(r.oof[i])]),
        )?;
        files.insert(format!("oof_{id}.csv"), oof);
        for f in &r.folds {
            files.insert(
                format!("models/{id}_r{}_f{}.json", f.repeat, f.fold),
                (f.model.to_json() + "\n").into_bytes(),
            );
        }
    }

    let mut comparisons = Vec::new();
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            comparisons.push(compare_models(&runs[i], &runs[j])?);
        }
    }
    let cmp = csv_bytes(
        &[
            "modelA",
            "modelB",
            "aurocA",
            "aurocB",
            "delongZ",
            "delongP",
            "auprcA",
            "auprcB",
            "auprcBootstrapZ",
            "auprcBootstrapP",
            "mcnemarB",
            "mcnemarC",
            "mcnemarChi2",
            "mcnemarP",
        ],
        comparisons.iter().map(|c| {
            vec![
                c.model_a.clone(),
                c.model_b.clone(),
                fmt_f64(c.delong.auc_a),
                fmt_f64(c.delong.auc_b),
                fmt_f64(c.delong.z),
                fmt_f64(c.delong.p),
                fmt_f64(c.auprc.auc_a),
                fmt_f64(c.auprc.auc_b),
                fmt_f64(c.auprc.z),
                fmt_f64(c.auprc.p),
                c.discordant.0.to_string(),
                c.discordant.1.to_string(),
                fmt_f64(c.mcnemar.statistic),
                fmt_f64(c.mcnemar.p),
            ]
        }),
    )?;
    files.insert("comparisons.csv".into(), cmp);

    // Ranking and regression follow the widest model in the bundle.
    let widest = runs.iter().max_by_key(|r| r.spec.id).expect("non-empty");
    let selected = match &widest.full_selection {
        Some((ranking, top)) => {
            let mut buf = Vec::new();
            treeshap::write_ranking_csv(&mut buf, ranking)?;
            files.insert("ranking.csv".into(), buf);
            let mut feats = widest.spec.fixed_features();
            for f in top {
                if !feats.contains(f) {
                    feats.push(f.clone());
                }
            }
            feats
        }
        None => widest.spec.fixed_features(),
    };
    let reg = regression_table(data, &selected)?;
    let reg_csv = csv_bytes(
        &["analysis", "term", "OR", "ciLow", "ciHigh", "p", "coefficient", "stdError", "status"],
        reg.iter().map(|r| {
            vec![
                r.analysis.clone(),
                r.term.clone(),
                fmt_f64(r.odds_ratio),
                fmt_f64(r.ci_low),
                fmt_f64(r.ci_high),
                fmt_f64(r.p),
                fmt_f64(r.coefficient),
                fmt_f64(r.std_error),
                r.status.clone(),
            ]
        }),
    )?;
    files.insert("regression.csv".into(), reg_csv);

    let mut dataset_bytes = Vec::new();
    for i in 0..data.len() {
        dataset_bytes.extend(data.patient_ids[i].as_bytes());
        dataset_bytes.push(data.labels[i]);
        for v in data.x.row(i) {
            dataset_bytes.extend(v.to_le_bytes());
        }
    }
    let manifest = ReportManifest {
        models: runs.iter().map(|r| r.spec.id.to_string()).collect(),
        cv: first.cv,
        train: first.train,
        model_specs: runs.iter().map(|r| r.spec).collect(),
        registry_hash: first.registry_hash.clone(),
        patients: data.len(),
        positives: data.labels.iter().filter(|&&l| l == 1).count(),
        dataset_hash: sha256_hex(&dataset_bytes),
        fold_assignments: first.assignments.iter().map(|a| a.fold_of.clone()).collect(),
        fold_warnings: first.assignments.iter().flat_map(|a| a.warnings.clone()).collect(),
        summaries: runs.iter().map(|r| (r.spec.id.to_string(), r.summary.clone())).collect(),
        folds: runs.iter().map(|r| (r.spec.id.to_string(), r.folds.clone())).collect(),
        files: files.iter().map(|(k, v)| (k.clone(), sha256_hex(v))).collect(),
    };
    for (name, bytes) in &files {
        std::fs::write(dir.join(name), bytes)?;
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

/// Selected-feature sets across folds, for stability summaries.
pub fn selection_frequency(run: &ExperimentRun) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for f in &run.folds {
        let uniq: BTreeSet<&String> = f.features.iter().collect();
        for name in uniq {
            *out.entry(name.clone()).or_insert(0) += 1;
        }
    }
    out
}
