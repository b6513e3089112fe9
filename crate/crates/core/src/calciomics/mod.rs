//! Calcium-omics: per-patient feature vectors combining clinical variables,
//! conventional calcium scores and quantitative lesion descriptors.

mod lesion;
mod registry;
mod table;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calscore::{self, ScoreError, ScoreSet, ScoringConfig};
use crate::volgrid::{
    extract_lesions, Artery, ArteryLabelMap, ExtractionConfig, LesionComponent, PreprocessConfig,
    Volume, VolumeError,
};

pub use lesion::{
    covariance_eigenvalues, first_order, glcm_features, glcm_matrix, lesion_first_order,
    lesion_second_order, lesion_shape, spatial_relations, FirstOrder, GlcmConfig, GlcmFeatures,
    LesionShape, SpatialRelations, GLCM_OFFSETS,
};
pub use registry::{
    hu_hist_name, mass_hist_name, FeatureDef, FeatureRegistry, FeatureScale, AGATSTON_FEATURE,
    CLINICAL_FEATURES, HU_HIST_BINS, MASS_HIST_BINS, REGISTRY_VERSION,
};
pub use table::{read_lesion_csv, write_lesion_csv, FeatureTable, LesionRecord};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("missing clinical field `{field}` for patient {patient}")]
    MissingClinical { patient: String, field: &'static str },
    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(u8),
    #[error("cannot fit mass histogram: {0}")]
    HistogramFit(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("feature table: {0}")]
    Table(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bin layout for the pooled-HU histogram features.
const HU_HIST: GlcmConfig = GlcmConfig {
    bins: HU_HIST_BINS,
    lo_hu: 130,
    hi_hu: 1024,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PooledStats {
    pub lesion_count: usize,
    pub first_order: FirstOrder,
    /// Normalized frequencies of pooled HU in 8 bins over [130, 1024].
    pub histogram: [f64; HU_HIST_BINS],
}

impl PooledStats {
    fn from_lesions<'a>(lesions: impl Iterator<Item = &'a LesionComponent>, pre: &PreprocessConfig) -> Self {
        let mut count = 0;
        let mut hu = Vec::new();
        for l in lesions {
            count += 1;
            hu.extend_from_slice(&l.hu);
        }
        let mut histogram = [0.0; HU_HIST_BINS];
        for &h in &hu {
            histogram[HU_HIST.level(h)] += 1.0;
        }
        if !hu.is_empty() {
            for b in &mut histogram {
                *b /= hu.len() as f64;
            }
        }
        Self {
            lesion_count: count,
            first_order: first_order(&hu, pre),
            histogram,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArteryHeartAggregates {
    /// Indexed by [`Artery::slot`].
    pub per_artery: [PooledStats; 4],
    pub heart: PooledStats,
}

/// Pooled-HU statistics per artery and for the whole heart. Empty groups
/// report zeros (and a zero lesion count).
pub fn artery_heart_aggregates(lesions: &[LesionComponent], pre: &PreprocessConfig) -> ArteryHeartAggregates {
    ArteryHeartAggregates {
        per_artery: Artery::ALL.map(|a| PooledStats::from_lesions(lesions.iter().filter(|l| l.artery == a), pre)),
        heart: PooledStats::from_lesions(lesions.iter(), pre),
    }
}

/// Which rows a fitted artifact was fitted on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitProvenance {
    pub label: String,
    pub training_rows: Vec<usize>,
}

impl FitProvenance {
    pub fn new(label: impl Into<String>, mut training_rows: Vec<usize>) -> Self {
        training_rows.sort_unstable();
        training_rows.dedup();
        Self {
            label: label.into(),
            training_rows,
        }
    }

    /// Whether any of `rows` was used for fitting.
    pub fn overlaps(&self, rows: &[usize]) -> bool {
        rows.iter().any(|r| self.training_rows.binary_search(r).is_ok())
    }
}

/// Five lesion-mass bins with edges at the training lesion-mass quintiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    /// Interior edges; the outer edges are 0 and +inf.
    inner_edges: [f64; MASS_HIST_BINS - 1],
    pub fitted_on: FitProvenance,
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl HistogramSpec {
    pub fn fit(masses: &[f64], fitted_on: FitProvenance) -> Result<Self, FeatureError> {
        if masses.is_empty() {
            return Err(FeatureError::HistogramFit("no training lesions".into()));
        }
        if let Some(m) = masses.iter().find(|m| !m.is_finite()) {
            return Err(FeatureError::HistogramFit(format!("non-finite mass {m}")));
        }
        let mut sorted = masses.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut inner = [0.0; MASS_HIST_BINS - 1];
        let mut prev = 0.0f64;
        for (k, e) in inner.iter_mut().enumerate() {
            let q = quantile_sorted(&sorted, (k + 1) as f64 / MASS_HIST_BINS as f64);
            // keep edges strictly ascending when quantiles tie
            *e = if q > prev { q } else { prev.next_up() };
            prev = *e;
        }
        Ok(Self {
            inner_edges: inner,
            fitted_on,
        })
    }

    pub fn from_edges(inner_edges: [f64; MASS_HIST_BINS - 1], fitted_on: FitProvenance) -> Result<Self, FeatureError> {
        let mut prev = 0.0;
        for &e in &inner_edges {
            if !(e.is_finite() && e > prev) {
                return Err(FeatureError::HistogramFit(format!(
                    "edges must be finite and strictly ascending above 0: {inner_edges:?}"
                )));
            }
            prev = e;
        }
        Ok(Self {
            inner_edges,
            fitted_on,
        })
    }

    /// All six edges, from 0 to +inf.
    pub fn edges(&self) -> [f64; MASS_HIST_BINS + 1] {
        let mut out = [0.0; MASS_HIST_BINS + 1];
        out[1..MASS_HIST_BINS].copy_from_slice(&self.inner_edges);
        out[MASS_HIST_BINS] = f64::INFINITY;
        out
    }

    /// Bin `i` holds masses in `[edges[i], edges[i+1])`; masses below 0 go to
    /// the first bin.
    pub fn bin(&self, mass: f64) -> usize {
        self.inner_edges.iter().filter(|&&e| e <= mass).count()
    }
}

pub fn mass_hist(masses: &[f64], spec: &HistogramSpec) -> [usize; MASS_HIST_BINS] {
    let mut counts = [0; MASS_HIST_BINS];
    for &m in masses {
        counts[spec.bin(m)] += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub age: Option<f64>,
    pub female: Option<bool>,
    pub diabetes: Option<bool>,
    pub smoking: Option<bool>,
}

impl ClinicalRecord {
    pub fn complete(age: f64, female: bool, diabetes: bool, smoking: bool) -> Self {
        Self {
            age: Some(age),
            female: Some(female),
            diabetes: Some(diabetes),
            smoking: Some(smoking),
        }
    }

    fn values(&self, patient: &str) -> Result<[f64; 4], FeatureError> {
        let missing = |field| FeatureError::MissingClinical {
            patient: patient.to_string(),
            field,
        };
        let flag = |v: Option<bool>, field| v.map(|b| b as u8 as f64).ok_or_else(|| missing(field));
        Ok([
            self.age.filter(|a| a.is_finite()).ok_or_else(|| missing("age"))?,
            flag(self.female, "female")?,
            flag(self.diabetes, "diabetes")?,
            flag(self.smoking, "smoking")?,
        ])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub extraction: ExtractionConfig,
    pub scoring: ScoringConfig,
    pub preprocess: PreprocessConfig,
    pub glcm: GlcmConfig,
}

pub struct PatientInputs<'a> {
    pub patient_id: &'a str,
    pub clinical: ClinicalRecord,
    pub label: u8,
    pub volume: &'a Volume,
    pub mask: &'a ArteryLabelMap,
}

/// Everything extracted for one patient; the mass-histogram block stays
/// unfilled until a fold-fitted [`HistogramSpec`] is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientExtraction {
    pub patient_id: String,
    pub label: u8,
    pub values: Vec<f64>,
    pub lesions: Vec<LesionComponent>,
    pub scores: ScoreSet,
    pub lesion_masses: Vec<f64>,
}

impl PatientExtraction {
    /// The registry-ordered feature vector; massHist columns are filled from
    /// `spec`, or left at 0 without one.
    pub fn to_vector(&self, spec: Option<&HistogramSpec>) -> FeatureVector {
        let mut values = self.values.clone();
        if let Some(spec) = spec {
            fill_mass_hist(&mut values, &FeatureRegistry::standard(), &self.lesion_masses, spec);
        }
        FeatureVector {
            patient_id: self.patient_id.clone(),
            values,
            label: self.label,
        }
    }

    pub fn lesion_records(&self) -> Vec<LesionRecord> {
        self.lesions
            .iter()
            .zip(&self.scores.per_lesion)
            .map(|(l, s)| LesionRecord {
                patient_id: self.patient_id.clone(),
                lesion_id: l.id,
                artery: l.artery.name().to_string(),
                voxel_count: l.voxel_count(),
                peak_hu: l.peak_hu,
                mean_hu: l.mean_hu,
                agatston_2d: s.agatston_2d,
                volume_score: s.volume_score,
                mass_score: s.mass_score,
            })
            .collect()
    }
}

/// Overwrites the massHist block of a registry-ordered row.
pub fn fill_mass_hist(values: &mut [f64], registry: &FeatureRegistry, masses: &[f64], spec: &HistogramSpec) {
    let counts = mass_hist(masses, spec);
    for (b, c) in counts.iter().enumerate() {
        if let Some(i) = registry.index_of(&mass_hist_name(b)) {
            values[i] = *c as f64;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub patient_id: String,
    pub values: Vec<f64>,
    pub label: u8,
}

fn mean_of(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn max_of(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v)))).unwrap_or(0.0)
}

fn min_of(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v)))).unwrap_or(0.0)
}

/// Runs lesion extraction, scoring and every descriptor for one patient.
pub fn extract_patient(inputs: &PatientInputs<'_>, cfg: &ExtractorConfig) -> Result<PatientExtraction, FeatureError> {
    if inputs.label > 1 {
        return Err(FeatureError::InvalidLabel(inputs.label));
    }
    let clinical = inputs.clinical.values(inputs.patient_id)?;
    let lesions = extract_lesions(inputs.volume, inputs.mask, &cfg.extraction)?;
    let scores = calscore::aggregate_scores(&lesions, inputs.volume, &cfg.scoring)?;
    let spacing = inputs.volume.spacing();
    let pooled = artery_heart_aggregates(&lesions, &cfg.preprocess);
    let first: Vec<FirstOrder> = lesions.iter().map(|l| lesion_first_order(l, &cfg.preprocess)).collect();
    let texture: Vec<GlcmFeatures> = lesions.iter().map(|l| lesion_second_order(l, &cfg.glcm)).collect();
    let shape: Vec<LesionShape> = lesions.iter().map(|l| lesion_shape(l, spacing)).collect();
    let spatial = spatial_relations(&lesions, spacing);
    let lesion_masses: Vec<f64> = scores.per_lesion.iter().map(|b| b.mass_score).collect();

    let mut values = Vec::with_capacity(FeatureRegistry::standard().len());
    values.extend_from_slice(&clinical);
    let heart = &scores.heart;
    values.extend([
        heart.agatston_2d,
        heart.agatston_3d,
        heart.mass_score,
        heart.volume_score,
        calscore::area_2d_total(&lesions),
        calscore::num_art_calc(&lesions) as f64,
        lesions.len() as f64,
    ]);
    let hf = &pooled.heart.first_order;
    values.extend([hf.mean, hf.sd, hf.skewness, hf.kurtosis, hf.min, hf.max]);
    values.extend(pooled.heart.histogram);
    for a in Artery::ALL {
        let s = scores.artery(a);
        let p = &pooled.per_artery[a.slot()];
        values.extend([
            s.agatston_2d,
            s.agatston_3d,
            s.mass_score,
            s.volume_score,
            p.lesion_count as f64,
            (p.lesion_count > 0) as u8 as f64,
            p.first_order.mean,
            p.first_order.sd,
            p.first_order.skewness,
            p.first_order.kurtosis,
        ]);
    }
    values.extend([
        mean_of(shape.iter().map(|s| s.voxel_count as f64)),
        max_of(shape.iter().map(|s| s.voxel_count as f64)),
        max_of(shape.iter().map(|s| s.max_slice_area)),
        mean_of(shape.iter().map(|s| s.elongation)),
        mean_of(shape.iter().map(|s| s.flatness)),
        mean_of(shape.iter().map(|s| s.bbox_fill)),
        mean_of(first.iter().map(|f| f.mean)),
        max_of(first.iter().map(|f| f.max)),
        min_of(first.iter().map(|f| f.min)),
        mean_of(first.iter().map(|f| f.sd)),
        mean_of(first.iter().map(|f| f.skewness)),
        mean_of(first.iter().map(|f| f.kurtosis)),
        mean_of(first.iter().map(|f| f.energy)),
        mean_of(texture.iter().map(|t| t.contrast)),
        mean_of(texture.iter().map(|t| t.correlation)),
        mean_of(texture.iter().map(|t| t.energy)),
        mean_of(texture.iter().map(|t| t.homogeneity)),
        mean_of(lesion_masses.iter().copied()),
        max_of(lesion_masses.iter().copied()),
        mean_of(scores.per_lesion.iter().map(|b| b.volume_score)),
    ]);
    values.extend([
        spatial.mean_nn_dist,
        spatial.max_nn_dist,
        spatial.centroid_spread,
        spatial.rel_pos_mean,
        spatial.rel_pos_max,
    ]);
    values.extend([0.0; MASS_HIST_BINS]);
    debug_assert_eq!(values.len(), FeatureRegistry::standard().len());

    Ok(PatientExtraction {
        patient_id: inputs.patient_id.to_string(),
        label: inputs.label,
        values,
        lesions,
        scores,
        lesion_masses,
    })
}

/// Extracts and assembles the registry-ordered vector for one patient.
pub fn assemble_features(
    inputs: &PatientInputs<'_>,
    cfg: &ExtractorConfig,
    spec: Option<&HistogramSpec>,
) -> Result<FeatureVector, FeatureError> {
    Ok(extract_patient(inputs, cfg)?.to_vector(spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::{Dims, Spacing};

    fn provenance() -> FitProvenance {
        FitProvenance::new("test", vec![0, 1, 2])
    }

    #[test]
    fn histogram_quintiles_and_binning() {
        let masses: Vec<f64> = (1..=10).map(|m| m as f64).collect();
        let spec = HistogramSpec::fit(&masses, provenance()).unwrap();
        let e = spec.edges();
        assert_eq!(e[0], 0.0);
        assert_eq!(e[5], f64::INFINITY);
        assert!((e[1] - 2.8).abs() < 1e-12);
        assert!(e.windows(2).all(|w| w[0] < w[1]));
        let counts = mass_hist(&masses, &spec);
        assert_eq!(counts.iter().sum::<usize>(), 10);
        assert_eq!(counts, [2, 2, 2, 2, 2]);
        assert_eq!(mass_hist(&[], &spec), [0; 5]);
        assert_eq!(mass_hist(&[0.1, 0.2], &spec)[0], 2);
    }

    #[test]
    fn tied_quintiles_stay_strictly_ascending() {
        let spec = HistogramSpec::fit(&[5.0; 7], provenance()).unwrap();
        assert!(spec.edges().windows(2).all(|w| w[0] < w[1]));
        assert!(HistogramSpec::fit(&[], provenance()).is_err());
    }

    #[test]
    fn provenance_overlap() {
        let p = FitProvenance::new("f0", vec![4, 1, 9]);
        assert!(p.overlaps(&[3, 9]));
        assert!(!p.overlaps(&[0, 2, 3]));
    }

    fn empty_patient() -> (Volume, ArteryLabelMap) {
        let dims = Dims::new(6, 6, 3);
        (
            Volume::filled(dims, Spacing::default(), 20).unwrap(),
            ArteryLabelMap::empty(dims).unwrap(),
        )
    }

    #[test]
    fn zero_lesion_patient_is_clinical_plus_zeros() {
        let (v, m) = empty_patient();
        let inputs = PatientInputs {
            patient_id: "p0",
            clinical: ClinicalRecord::complete(61.0, true, false, true),
            label: 0,
            volume: &v,
            mask: &m,
        };
        let fv = assemble_features(&inputs, &ExtractorConfig::default(), None).unwrap();
        assert_eq!(fv.values.len(), FeatureRegistry::standard().len());
        assert_eq!(&fv.values[..4], &[61.0, 1.0, 0.0, 1.0]);
        assert!(fv.values[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_clinical_field_is_an_error() {
        let (v, m) = empty_patient();
        let mut clinical = ClinicalRecord::complete(61.0, true, false, true);
        clinical.diabetes = None;
        let inputs = PatientInputs {
            patient_id: "p0",
            clinical,
            label: 0,
            volume: &v,
            mask: &m,
        };
        match assemble_features(&inputs, &ExtractorConfig::default(), None) {
            Err(FeatureError::MissingClinical { field, .. }) => assert_eq!(field, "diabetes"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn one_artery_heart_equals_artery() {
        let (mut v, mut m) = empty_patient();
        for (x, h) in [(1, 200), (2, 450), (3, 700)] {
            v.set(x, 1, 1, h);
            m.set(x, 1, 1, Some(Artery::LCX));
        }
        let lesions = extract_lesions(&v, &m, &ExtractionConfig::default()).unwrap();
        let agg = artery_heart_aggregates(&lesions, &PreprocessConfig::default());
        assert_eq!(agg.heart, agg.per_artery[Artery::LCX.slot()]);
        assert_eq!(agg.per_artery[Artery::LM.slot()], PooledStats::default());
        assert!((agg.heart.histogram.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
