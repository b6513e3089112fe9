//! Synthetic phantoms and cohorts with known ground truth.
//!
//! Lesions are rasterized on voxel centres: a voxel belongs to a lesion iff
//! its centre lies inside the shape. Ground-truth scores are computed from
//! the rasterized voxel set before noise is added, so on noise-free
//! phantoms they are exact.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calciomics::{
    extract_patient, ClinicalRecord, ExtractorConfig, FeatureError, FeatureRegistry, FeatureTable, FitProvenance,
    HistogramSpec, LesionRecord, PatientExtraction, PatientInputs,
};
use crate::volgrid::{self, Artery, ArteryLabelMap, Dims, Spacing, Volume, VolumeError, HU_MAX, HU_MIN};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid phantom: {0}")]
    InvalidPhantom(String),
    #[error("invalid cohort spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible prevalence: {0}")]
    InfeasiblePrevalence(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solid {
    Box,
    Ellipsoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum HuProfile {
    Constant { hu: i16 },
    /// Linear in the normalized distance from the centre (0) to the surface (1).
    RadialRamp { center_hu: i16, edge_hu: i16 },
}

impl HuProfile {
    fn at(&self, r: f64) -> i16 {
        match *self {
            HuProfile::Constant { hu } => hu,
            HuProfile::RadialRamp { center_hu, edge_hu } => {
                let v = center_hu as f64 + (edge_hu as f64 - center_hu as f64) * r.clamp(0.0, 1.0);
                v.round() as i16
            }
        }
    }

    fn min_hu(&self) -> i16 {
        match *self {
            HuProfile::Constant { hu } => hu,
            HuProfile::RadialRamp { center_hu, edge_hu } => center_hu.min(edge_hu),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct LesionSpec {
    pub artery: Artery,
    pub shape: Solid,
    pub center_mm: [f64; 3],
    /// Half-widths for boxes, semi-axes for ellipsoids.
    pub extents_mm: [f64; 3],
    pub profile: HuProfile,
}

impl LesionSpec {
    /// Normalized distance of a point from the centre; inside iff <= 1.
    fn radius(&self, p: [f64; 3]) -> f64 {
        let q: Vec<f64> = (0..3).map(|a| (p[a] - self.center_mm[a]) / self.extents_mm[a]).collect();
        match self.shape {
            Solid::Box => q.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            Solid::Ellipsoid => q.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    /// An axis-aligned box covering exactly the voxels `lo..lo+size`.
    pub fn voxel_box(artery: Artery, lo: [usize; 3], size: [usize; 3], spacing: Spacing, profile: HuProfile) -> Self {
        let d = [spacing.dx, spacing.dy, spacing.dz];
        Self {
            artery,
            shape: Solid::Box,
            center_mm: std::array::from_fn(|a| (lo[a] as f64 + size[a] as f64 / 2.0) * d[a]),
            extents_mm: std::array::from_fn(|a| size[a] as f64 / 2.0 * d[a]),
            profile,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    pub background_hu: i16,
    pub noise_sigma: f64,
    pub lesions: Vec<LesionSpec>,
}

impl PhantomSpec {
    pub fn empty(dims: Dims, spacing: Spacing) -> Self {
        Self {
            dims,
            spacing,
            background_hu: 40,
            noise_sigma: 0.0,
            lesions: Vec::new(),
        }
    }
}

/// Expected scores of one planted lesion, computed from its rasterization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroundTruthLesion {
    pub artery: Artery,
    /// Voxel coordinates in scan order.
    pub voxels: Vec<[usize; 3]>,
    pub peak_hu: i16,
    pub mean_hu: f64,
    #[serde(rename = "agatston2D")]
    pub agatston_2d: f64,
    #[serde(rename = "agatston3D")]
    pub agatston_3d: f64,
    pub volume_mm3: f64,
    #[serde(rename = "area2D")]
    pub area_2d: f64,
    pub mass: f64,
}

fn weight(hu: i16) -> f64 {
    match hu {
        i16::MIN..=129 => 0.0,
        130..=199 => 1.0,
        200..=299 => 2.0,
        300..=399 => 3.0,
        _ => 4.0,
    }
}

fn ground_truth(artery: Artery, mut cells: Vec<([usize; 3], i16)>, spacing: Spacing) -> GroundTruthLesion {
    cells.sort_by_key(|(c, _)| (c[2], c[1], c[0]));
    let pixel = spacing.dx * spacing.dy;
    let mut slices: BTreeMap<usize, (usize, i16)> = BTreeMap::new();
    for &([_, _, z], hu) in &cells {
        let e = slices.entry(z).or_insert((0, i16::MIN));
        e.0 += 1;
        e.1 = e.1.max(hu);
    }
    let mut agatston_2d = 0.0;
    for &(count, peak) in slices.values() {
        let area = count as f64 * pixel;
        if area >= 1.0 {
            agatston_2d += area * weight(peak);
        }
    }
    let n = cells.len() as f64;
    let volume = n * pixel * spacing.dz;
    let peak = cells.iter().map(|c| c.1).max().unwrap_or(0);
    let mean = cells.iter().map(|c| c.1 as f64).sum::<f64>() / n;
    GroundTruthLesion {
        artery,
        voxels: cells.iter().map(|c| c.0).collect(),
        peak_hu: peak,
        mean_hu: mean,
        agatston_2d,
        agatston_3d: weight(peak) * volume,
        volume_mm3: volume,
        area_2d: n * pixel,
        mass: 0.001 * mean * volume,
    }
}

fn rasterize(spec: &LesionSpec, dims: Dims, spacing: Spacing) -> Vec<([usize; 3], i16)> {
    let d = [spacing.dx, spacing.dy, spacing.dz];
    let n = [dims.nx, dims.ny, dims.nz];
    // index range whose centres can fall inside the bounding box
    let range = |a: usize| {
        let lo = ((spec.center_mm[a] - spec.extents_mm[a]) / d[a] - 0.5).floor().max(0.0) as usize;
        let hi = (((spec.center_mm[a] + spec.extents_mm[a]) / d[a] - 0.5).ceil().max(-1.0) + 1.0) as usize;
        lo..hi.min(n[a])
    };
    let mut out = Vec::new();
    for z in range(2) {
        for y in range(1) {
            for x in range(0) {
                let r = spec.radius(spacing.center_mm([x, y, z]));
                if r <= 1.0 {
                    out.push(([x, y, z], spec.profile.at(r)));
                }
            }
        }
    }
    out
}

fn is_26_connected(voxels: &[[usize; 3]]) -> bool {
    let set: BTreeSet<[usize; 3]> = voxels.iter().copied().collect();
    let Some(&start) = voxels.first() else {
        return true;
    };
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let c = [v[0] as i64 + dx, v[1] as i64 + dy, v[2] as i64 + dz];
                    if c.iter().any(|&k| k < 0) {
                        continue;
                    }
                    let c = [c[0] as usize, c[1] as usize, c[2] as usize];
                    if set.contains(&c) && seen.insert(c) {
                        queue.push_back(c);
                    }
                }
            }
        }
    }
    seen.len() == set.len()
}

fn touching(a: &[[usize; 3]], b: &BTreeSet<[usize; 3]>) -> bool {
    a.iter().any(|v| {
        (-1i64..=1).any(|dz| {
            (-1i64..=1).any(|dy| {
                (-1i64..=1).any(|dx| {
                    let c = [v[0] as i64 + dx, v[1] as i64 + dy, v[2] as i64 + dz];
                    c.iter().all(|&k| k >= 0) && b.contains(&[c[0] as usize, c[1] as usize, c[2] as usize])
                })
            })
        })
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub mask: ArteryLabelMap,
    /// One entry per planted lesion, in spec order.
    pub truth: Vec<GroundTruthLesion>,
}

/// Builds the volume, the artery map (lesion voxels plus a one-voxel
/// margin) and the analytic ground truth. Deterministic in (spec, seed).
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom, CohortError> {
    let dims = spec.dims;
    spec.spacing.validate()?;
    if dims.is_empty() {
        return Err(CohortError::InvalidPhantom("empty grid".into()));
    }
    if !(spec.noise_sigma.is_finite() && spec.noise_sigma >= 0.0) {
        return Err(CohortError::InvalidPhantom(format!("noise sigma {}", spec.noise_sigma)));
    }
    if !(HU_MIN..=HU_MAX).contains(&spec.background_hu) {
        return Err(CohortError::InvalidPhantom(format!("background {} HU out of range", spec.background_hu)));
    }
    let mut rasters = Vec::with_capacity(spec.lesions.len());
    for (i, l) in spec.lesions.iter().enumerate() {
        if l.extents_mm.iter().any(|e| !(e.is_finite() && *e > 0.0)) || l.center_mm.iter().any(|c| !c.is_finite()) {
            return Err(CohortError::InvalidPhantom(format!("lesion {i} has invalid geometry")));
        }
        if l.profile.min_hu() < crate::calscore::CALCIUM_THRESHOLD_HU {
            return Err(CohortError::InvalidPhantom(format!("lesion {i} profile drops below 130 HU")));
        }
        if l.profile.at(0.0) > HU_MAX {
            return Err(CohortError::InvalidPhantom(format!("lesion {i} exceeds {HU_MAX} HU")));
        }
        let cells = rasterize(l, dims, spec.spacing);
        if cells.is_empty() {
            return Err(CohortError::InvalidPhantom(format!("lesion {i} covers no voxel centre inside the grid")));
        }
        let voxels: Vec<[usize; 3]> = cells.iter().map(|c| c.0).collect();
        if !is_26_connected(&voxels) {
            return Err(CohortError::InvalidPhantom(format!("lesion {i} rasterizes to disconnected pieces")));
        }
        rasters.push(cells);
    }
    for i in 0..rasters.len() {
        let vi: Vec<[usize; 3]> = rasters[i].iter().map(|c| c.0).collect();
        for j in i + 1..rasters.len() {
            let vj: BTreeSet<[usize; 3]> = rasters[j].iter().map(|c| c.0).collect();
            if touching(&vi, &vj) {
                return Err(CohortError::InvalidPhantom(format!("lesions {i} and {j} overlap or touch")));
            }
        }
    }

    let mut volume = Volume::filled(dims, spec.spacing, spec.background_hu)?;
    let mut mask = ArteryLabelMap::empty(dims)?;
    for (l, cells) in spec.lesions.iter().zip(&rasters) {
        for &([x, y, z], hu) in cells {
            volume.set(x, y, z, hu);
        }
        for &([x, y, z], _) in cells {
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (cx, cy, cz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if cx < 0 || cy < 0 || cz < 0 || cx >= dims.nx as i64 || cy >= dims.ny as i64 || cz >= dims.nz as i64
                        {
                            continue;
                        }
                        let (cx, cy, cz) = (cx as usize, cy as usize, cz as usize);
                        if mask.get(cx, cy, cz) == 0 {
                            mask.set(cx, cy, cz, Some(l.artery));
                        }
                    }
                }
            }
        }
        // lesion voxels always carry their own artery
        for &([x, y, z], _) in cells {
            mask.set(x, y, z, Some(l.artery));
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let v = volume.get(x, y, z) as f64 + normal.sample(&mut rng);
                    volume.set(x, y, z, v.round().clamp(HU_MIN as f64, HU_MAX as f64) as i16);
                }
            }
        }
    }
    let truth = spec
        .lesions
        .iter()
        .zip(rasters)
        .map(|(l, cells)| ground_truth(l.artery, cells, spec.spacing))
        .collect();
    Ok(Phantom { volume, mask, truth })
}

// ---------------------------------------------------------------------------
// Cohorts

/// Marginal rates of the clinical covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClinicalDistributions {
    pub age_mean: f64,
    pub age_sd: f64,
    pub female_rate: f64,
    pub diabetes_rate: f64,
    pub smoking_rate: f64,
}

impl Default for ClinicalDistributions {
    /// Overall cohort margins from the study's baseline table.
    fn default() -> Self {
        Self {
            age_mean: 62.8,
            age_sd: 8.8,
            female_rate: 0.516,
            diabetes_rate: 0.250,
            smoking_rate: 0.397,
        }
    }
}

/// Logistic outcome model. The coefficients are synthetic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutcomeModel {
    /// Calibrated to the target prevalence when absent.
    pub intercept: Option<f64>,
    pub log_agatston: f64,
    pub num_art_calc: f64,
    pub diabetes: f64,
    pub female: f64,
}

impl Default for OutcomeModel {
    fn default() -> Self {
        Self {
            intercept: None,
            log_agatston: 0.45,
            num_art_calc: 0.9,
            diabetes: 0.4,
            female: -0.5,
        }
    }
}

impl OutcomeModel {
    pub fn null() -> Self {
        Self {
            intercept: None,
            log_agatston: 0.0,
            num_art_calc: 0.0,
            diabetes: 0.0,
            female: 0.0,
        }
    }

    fn linear(&self, agatston: f64, num_art: usize, c: &ClinicalRecord) -> f64 {
        self.log_agatston * agatston.ln_1p()
            + self.num_art_calc * num_art as f64
            + self.diabetes * c.diabetes.unwrap_or(false) as u8 as f64
            + self.female * c.female.unwrap_or(false) as u8 as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub n: usize,
    pub prevalence: f64,
    pub clinical: ClinicalDistributions,
    pub outcome: OutcomeModel,
    pub dims: Dims,
    pub spacing: Spacing,
    pub noise_sigma: f64,
    /// Draw exactly round(n * prevalence) positives.
    pub exact_prevalence: bool,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n: 200,
            prevalence: 0.09,
            clinical: ClinicalDistributions::default(),
            outcome: OutcomeModel::default(),
            dims: Dims::new(40, 40, 12),
            spacing: Spacing::default(),
            noise_sigma: 0.0,
            exact_prevalence: true,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |m: String| Err(CohortError::InvalidSpec(m));
        if self.n < 10 {
            return bad(format!("n must be at least 10, got {}", self.n));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return bad(format!("prevalence must be in (0, 1), got {}", self.prevalence));
        }
        let c = &self.clinical;
        for (name, r) in [
            ("female_rate", c.female_rate),
            ("diabetes_rate", c.diabetes_rate),
            ("smoking_rate", c.smoking_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must be in [0, 1], got {r}"));
            }
        }
        if !(c.age_sd.is_finite() && c.age_sd >= 0.0 && c.age_mean.is_finite()) {
            return bad("age distribution must be finite with sd >= 0".into());
        }
        if self.dims.nx < 16 || self.dims.ny < 16 || self.dims.nz < 8 {
            return bad("grid must be at least 16 x 16 x 8".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        self.spacing.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPatient {
    pub id: String,
    pub clinical: ClinicalRecord,
    pub label: u8,
    /// Outcome probability under the (calibrated) model.
    pub probability: f64,
    pub phantom: Phantom,
}

impl SyntheticPatient {
    pub fn agatston(&self) -> f64 {
        self.phantom.truth.iter().map(|t| t.agatston_2d).sum()
    }

    pub fn num_art_calc(&self) -> usize {
        self.phantom.truth.iter().map(|t| t.artery).collect::<BTreeSet<_>>().len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub seed: u64,
    pub intercept: f64,
    pub patients: Vec<SyntheticPatient>,
}

impl Cohort {
    pub fn prevalence(&self) -> f64 {
        self.patients.iter().filter(|p| p.label == 1).count() as f64 / self.patients.len() as f64
    }
}

pub fn patient_id(i: usize) -> String {
    format!("P{:04}", i + 1)
}

/// Quadrant of the grid assigned to each artery, as (x0, y0) in voxels.
fn quadrant(a: Artery, dims: Dims) -> (usize, usize, usize, usize) {
    let (hx, hy) = (dims.nx / 2, dims.ny / 2);
    match a {
        Artery::LM => (0, 0, hx, hy),
        Artery::LAD => (hx, 0, dims.nx - hx, hy),
        Artery::LCX => (0, hy, hx, dims.ny - hy),
        Artery::RCA => (hx, hy, dims.nx - hx, dims.ny - hy),
    }
}

/// Random calcified lesions: arteries are drawn first, then one or two
/// lesions per artery in separate z slots of its quadrant.
fn random_lesions(rng: &mut ChaCha8Rng, dims: Dims, spacing: Spacing) -> Vec<LesionSpec> {
    let n_art = match rng.random::<f64>() {
        u if u < 0.35 => 1,
        u if u < 0.65 => 2,
        u if u < 0.85 => 3,
        _ => 4,
    };
    let mut arteries = Artery::ALL.to_vec();
    for i in (1..arteries.len()).rev() {
        arteries.swap(i, rng.random_range(0..=i));
    }
    arteries.truncate(n_art);
    arteries.sort();
    let slot_depth = dims.nz / 2;
    let size_scale = (rng.random::<f64>() * 2.0 - 1.0) * 0.6;
    let mut out = Vec::new();
    for a in arteries {
        let (qx, qy, qw, qh) = quadrant(a, dims);
        let n_lesions = if rng.random::<f64>() < 0.5 { 1 } else { 2 };
        for slot in 0..n_lesions {
            // room inside the quadrant with a one-voxel border on every side
            let max_w = qw - 2;
            let max_h = qh - 2;
            let max_d = slot_depth - 2;
            let grow = |rng: &mut ChaCha8Rng, max: usize| -> usize {
                let v = (1.2f64.ln() + size_scale + 0.6 * sample_std_normal(rng)).exp() * 2.5;
                (v.round() as usize).clamp(2, max)
            };
            let w = grow(rng, max_w);
            let h = grow(rng, max_h);
            let d = rng.random_range(1..=max_d.min(3));
            let x0 = qx + 1 + rng.random_range(0..=max_w - w);
            let y0 = qy + 1 + rng.random_range(0..=max_h - h);
            let z0 = slot * slot_depth + 1 + rng.random_range(0..=max_d - d);
            let profile = if rng.random::<f64>() < 0.5 {
                HuProfile::Constant {
                    hu: rng.random_range(130..=700),
                }
            } else {
                let center = rng.random_range(200..=900);
                HuProfile::RadialRamp {
                    center_hu: center,
                    edge_hu: rng.random_range(130..=center),
                }
            };
            let mut spec = LesionSpec::voxel_box(a, [x0, y0, z0], [w, h, d], spacing, profile);
            if rng.random::<f64>() < 0.5 && w >= 3 && h >= 3 {
                spec.shape = Solid::Ellipsoid;
                // semi-axes reach just past the outermost voxel centres
                for (ax, size) in [(0, w), (1, h), (2, d)] {
                    let dd = [spacing.dx, spacing.dy, spacing.dz][ax];
                    spec.extents_mm[ax] = ((size as f64 - 1.0) / 2.0 + 0.25) * dd;
                }
            }
            out.push(spec);
        }
    }
    out
}

fn sample_std_normal(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

fn sigmoid(m: f64) -> f64 {
    crate::boost::sigmoid(m)
}

/// Intercept b such that mean(sigmoid(b + eta_i)) equals the target.
fn calibrate_intercept(eta: &[f64], target: f64) -> f64 {
    let mean_p = |b: f64| eta.iter().map(|e| sigmoid(b + e)).sum::<f64>() / eta.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Draws labels with exactly `k` positives, each configuration weighted by
/// the product of its independent Bernoulli probabilities.
fn conditional_bernoulli(p: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = p.len();
    // tail[i][j]: probability that rows i.. hold exactly j positives
    let mut tail = vec![vec![0.0f64; k + 1]; n + 1];
    tail[n][0] = 1.0;
    for i in (0..n).rev() {
        for j in 0..=k {
            let without = (1.0 - p[i]) * tail[i + 1][j];
            let with = if j > 0 { p[i] * tail[i + 1][j - 1] } else { 0.0 };
            tail[i][j] = with + without;
        }
    }
    let mut labels = vec![0u8; n];
    let mut left = k;
    for i in 0..n {
        if left == 0 {
            break;
        }
        let take = p[i] * tail[i + 1][left - 1];
        let total = tail[i][left];
        let pick = if total > 0.0 {
            rng.random::<f64>() * total < take
        } else {
            // numerically unreachable state; fill greedily
            n - i <= left
        };
        if pick {
            labels[i] = 1;
            left -= 1;
        }
    }
    labels
}

/// Generates a cohort in memory. Each patient draws from its own RNG stream
/// of the master seed, so patients can be built in parallel.
pub fn generate_cohort(spec: &CohortSpec, seed: u64) -> Result<Cohort, CohortError> {
    spec.validate()?;
    let built: Vec<(ClinicalRecord, Phantom)> = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let c = &spec.clinical;
            let age = (c.age_mean + c.age_sd * sample_std_normal(&mut rng)).round().clamp(18.0, 100.0);
            let clinical = ClinicalRecord::complete(
                age,
                rng.random::<f64>() < c.female_rate,
                rng.random::<f64>() < c.diabetes_rate,
                rng.random::<f64>() < c.smoking_rate,
            );
            let phantom_spec = PhantomSpec {
                dims: spec.dims,
                spacing: spec.spacing,
                background_hu: 40,
                noise_sigma: spec.noise_sigma,
                lesions: random_lesions(&mut rng, spec.dims, spec.spacing),
            };
            let phantom = generate_phantom(&phantom_spec, rng.random())?;
            Ok((clinical, phantom))
        })
        .collect::<Result<_, CohortError>>()?;

    let eta: Vec<f64> = built
        .iter()
        .map(|(c, ph)| {
            let agatston: f64 = ph.truth.iter().map(|t| t.agatston_2d).sum();
            let arts = ph.truth.iter().map(|t| t.artery).collect::<BTreeSet<_>>().len();
            spec.outcome.linear(agatston, arts, c)
        })
        .collect();
    let intercept = match spec.outcome.intercept {
        Some(b) => b,
        None => calibrate_intercept(&eta, spec.prevalence),
    };
    let p: Vec<f64> = eta.iter().map(|e| sigmoid(intercept + e)).collect();
    let mean_p = p.iter().sum::<f64>() / p.len() as f64;
    if (mean_p - spec.prevalence).abs() > 0.02 {
        return Err(CohortError::InfeasiblePrevalence(format!(
            "model implies mean risk {mean_p:.4} against target {}",
            spec.prevalence
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let labels: Vec<u8> = if spec.exact_prevalence {
        let k = (spec.n as f64 * spec.prevalence).round() as usize;
        if k == 0 || k == spec.n {
            return Err(CohortError::InfeasiblePrevalence(format!(
                "n = {} and prevalence {} leave a single class",
                spec.n, spec.prevalence
            )));
        }
        conditional_bernoulli(&p, k, &mut rng)
    } else {
        p.iter().map(|&pi| (rng.random::<f64>() < pi) as u8).collect()
    };
    let patients = built
        .into_iter()
        .zip(labels)
        .zip(p)
        .enumerate()
        .map(|(i, (((clinical, phantom), label), probability))| SyntheticPatient {
            id: patient_id(i),
            clinical,
            label,
            probability,
            phantom,
        })
        .collect();
    Ok(Cohort {
        spec: spec.clone(),
        seed,
        intercept,
        patients,
    })
}

impl Cohort {
    /// Runs the feature extractor over every patient. The table's
    /// mass-histogram columns use edges fitted on the whole cohort; the
    /// lesion records allow refitting inside each training fold.
    pub fn extract(&self, cfg: &ExtractorConfig) -> Result<(FeatureTable, Vec<LesionRecord>), FeatureError> {
        let extractions: Vec<PatientExtraction> = self
            .patients
            .par_iter()
            .map(|p| {
                extract_patient(
                    &PatientInputs {
                        patient_id: &p.id,
                        clinical: p.clinical.clone(),
                        label: p.label,
                        volume: &p.phantom.volume,
                        mask: &p.phantom.mask,
                    },
                    cfg,
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(assemble_table(&extractions))
    }
}

/// Feature table and lesion records from per-patient extractions.
pub fn assemble_table(extractions: &[PatientExtraction]) -> (FeatureTable, Vec<LesionRecord>) {
    let masses: Vec<f64> = extractions.iter().flat_map(|e| e.lesion_masses.iter().copied()).collect();
    let spec = HistogramSpec::fit(&masses, FitProvenance::new("all rows", (0..extractions.len()).collect())).ok();
    let rows = extractions.iter().map(|e| e.to_vector(spec.as_ref())).collect();
    let lesions = extractions.iter().flat_map(|e| e.lesion_records()).collect();
    (FeatureTable::new(&FeatureRegistry::standard(), rows), lesions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClinicalRow {
    pub patient_id: String,
    pub age: f64,
    pub female: u8,
    pub diabetes: u8,
    pub smoking: u8,
    pub label: u8,
}

impl ClinicalRow {
    pub fn record(&self) -> ClinicalRecord {
        ClinicalRecord::complete(self.age, self.female == 1, self.diabetes == 1, self.smoking == 1)
    }
}

pub const CLINICAL_CSV: &str = "clinical.csv";
pub const GROUND_TRUTH_CSV: &str = "ground_truth.csv";
pub const COHORT_MANIFEST: &str = "cohort.json";

pub fn volume_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join("volumes").join(format!("{id}.ctv"))
}

pub fn mask_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join("masks").join(format!("{id}.ctm"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CohortManifest {
    pub seed: u64,
    pub spec: CohortSpec,
    pub intercept: f64,
    pub patients: usize,
    pub positives: usize,
    /// SHA-256 of every written file, keyed by relative path.
    pub files: BTreeMap<String, String>,
}

/// Writes volumes, masks, the clinical table, per-lesion ground truth and a
/// manifest under `dir`.
pub fn write_cohort(dir: &Path, cohort: &Cohort) -> Result<CohortManifest, CohortError> {
    std::fs::create_dir_all(dir.join("volumes"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut files = BTreeMap::new();
    for p in &cohort.patients {
        let vp = volume_path(dir, &p.id);
        let mp = mask_path(dir, &p.id);
        let vbytes = volgrid::encode_volume(&p.phantom.volume);
        let mbytes = volgrid::encode_label_map(&p.phantom.mask, p.phantom.volume.spacing());
        std::fs::write(&vp, &vbytes)?;
        std::fs::write(&mp, &mbytes)?;
        files.insert(format!("volumes/{}.ctv", p.id), crate::util::sha256_hex(&vbytes));
        files.insert(format!("masks/{}.ctm", p.id), crate::util::sha256_hex(&mbytes));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &cohort.patients {
        let c = &p.clinical;
        w.serialize(ClinicalRow {
            patient_id: p.id.clone(),
            age: c.age.unwrap_or(f64::NAN),
            female: c.female.unwrap_or(false) as u8,
            diabetes: c.diabetes.unwrap_or(false) as u8,
            smoking: c.smoking.unwrap_or(false) as u8,
            label: p.label,
        })?;
    }
    let clinical = w.into_inner().map_err(|e| e.into_error())?;
    std::fs::write(dir.join(CLINICAL_CSV), &clinical)?;
    files.insert(CLINICAL_CSV.to_string(), crate::util::sha256_hex(&clinical));

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "patientId",
        "lesion",
        "artery",
        "voxelCount",
        "peakHU",
        "agatston2D",
        "agatston3D",
        "volume",
        "area2D",
        "mass",
    ])?;
    for p in &cohort.patients {
        for (i, t) in p.phantom.truth.iter().enumerate() {
            w.write_record([
                p.id.clone(),
                i.to_string(),
                t.artery.name().to_string(),
                t.voxels.len().to_string(),
                t.peak_hu.to_string(),
                crate::util::fmt_f64(t.agatston_2d),
                crate::util::fmt_f64(t.agatston_3d),
                crate::util::fmt_f64(t.volume_mm3),
                crate::util::fmt_f64(t.area_2d),
                crate::util::fmt_f64(t.mass),
            ])?;
        }
    }
    let truth = w.into_inner().map_err(|e| e.into_error())?;
    std::fs::write(dir.join(GROUND_TRUTH_CSV), &truth)?;
    files.insert(GROUND_TRUTH_CSV.to_string(), crate::util::sha256_hex(&truth));

    let manifest = CohortManifest {
        seed: cohort.seed,
        spec: cohort.spec.clone(),
        intercept: cohort.intercept,
        patients: cohort.patients.len(),
        positives: cohort.patients.iter().filter(|p| p.label == 1).count(),
        files,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join(COHORT_MANIFEST), json + "\n")?;
    Ok(manifest)
}

pub fn read_clinical_csv(path: &Path) -> Result<Vec<ClinicalRow>, CohortError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}
