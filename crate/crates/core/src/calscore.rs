//! Conventional coronary calcium scores.
//!
//! Agatston scoring multiplies each lesion's area in a slice by a density
//! weight chosen from the peak attenuation in that slice. Volume and mass
//! scores are computed from the full 3D voxel set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volgrid::{Artery, LesionComponent, Volume};

/// Lowest HU eligible for a density weight.
pub const CALCIUM_THRESHOLD_HU: i16 = 130;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("peak HU {0} is below the 130 HU calcium threshold")]
    BelowThreshold(i32),
    #[error("slice area must be non-negative and finite, got {0}")]
    InvalidArea(f64),
    #[error("lesion voxel {voxel:?} lies outside the volume")]
    OutsideVolume { voxel: [usize; 3] },
    #[error("invalid scoring config: {0}")]
    InvalidConfig(String),
}

/// Density weight for a peak attenuation: 130-199 -> 1, 200-299 -> 2,
/// 300-399 -> 3, 400 and above -> 4.
pub fn density_weight(peak_hu: i16) -> Result<u8, ScoreError> {
    match peak_hu {
        i16::MIN..=129 => Err(ScoreError::BelowThreshold(peak_hu as i32)),
        130..=199 => Ok(1),
        200..=299 => Ok(2),
        300..=399 => Ok(3),
        _ => Ok(4),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    /// Lesion footprints smaller than this (per slice) score zero.
    pub min_slice_area_mm2: f64,
    /// Mass units per (HU * mm³).
    pub mass_calibration: f64,
    /// Multiplier applied to every Agatston slice term.
    pub slice_thickness_factor: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            min_slice_area_mm2: 1.0,
            mass_calibration: 0.001,
            slice_thickness_factor: 1.0,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        for (name, v) in [
            ("min_slice_area_mm2", self.min_slice_area_mm2),
            ("mass_calibration", self.mass_calibration),
            ("slice_thickness_factor", self.slice_thickness_factor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ScoreError::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn agatston_slice_term(area: f64, peak_hu: i16, cfg: &ScoringConfig) -> Result<f64, ScoreError> {
    if !(area.is_finite() && area >= 0.0) {
        return Err(ScoreError::InvalidArea(area));
    }
    let weight = density_weight(peak_hu)?;
    if area < cfg.min_slice_area_mm2 {
        return Ok(0.0);
    }
    Ok(area * weight as f64 * cfg.slice_thickness_factor)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "level", content = "artery")]
pub enum Scope {
    Lesion,
    Artery(Artery),
    Heart,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScoreBundle {
    pub scope: Scope,
    #[serde(rename = "agatston2D")]
    pub agatston_2d: f64,
    /// Lesion-peak density weight times lesion volume.
    #[serde(rename = "agatston3D")]
    pub agatston_3d: f64,
    pub volume_score: f64,
    pub mass_score: f64,
    #[serde(rename = "area2D")]
    pub area_2d: f64,
}

impl ScoreBundle {
    pub fn zero(scope: Scope) -> Self {
        Self {
            scope,
            agatston_2d: 0.0,
            agatston_3d: 0.0,
            volume_score: 0.0,
            mass_score: 0.0,
            area_2d: 0.0,
        }
    }

    fn accumulate(&mut self, other: &ScoreBundle) {
        self.agatston_2d += other.agatston_2d;
        self.agatston_3d += other.agatston_3d;
        self.volume_score += other.volume_score;
        self.mass_score += other.mass_score;
        self.area_2d += other.area_2d;
    }
}

/// Scores one lesion. Slices whose peak falls below 130 HU (possible only
/// with a lowered extraction threshold) contribute no Agatston term.
pub fn score_lesion(l: &LesionComponent, v: &Volume, cfg: &ScoringConfig) -> Result<ScoreBundle, ScoreError> {
    cfg.validate()?;
    let dims = v.dims();
    if let Some(&voxel) = l
        .voxels
        .iter()
        .find(|[x, y, z]| *x >= dims.nx || *y >= dims.ny || *z >= dims.nz)
    {
        return Err(ScoreError::OutsideVolume { voxel });
    }
    let spacing = v.spacing();
    let peaks = l.slice_peaks();
    let mut agatston_2d = 0.0;
    for (z, &area) in &l.per_slice_area {
        let peak = peaks[z];
        if peak >= CALCIUM_THRESHOLD_HU {
            agatston_2d += agatston_slice_term(area, peak, cfg)?;
        }
    }
    let volume_score = l.voxel_count() as f64 * spacing.voxel_volume();
    let agatston_3d = match density_weight(l.peak_hu) {
        Ok(w) => w as f64 * volume_score,
        Err(_) => 0.0,
    };
    Ok(ScoreBundle {
        scope: Scope::Lesion,
        agatston_2d,
        agatston_3d,
        volume_score,
        mass_score: cfg.mass_calibration * l.mean_hu * volume_score,
        area_2d: l.per_slice_area.values().sum(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub per_lesion: Vec<ScoreBundle>,
    /// Indexed by [`Artery::slot`].
    pub per_artery: [ScoreBundle; 4],
    pub heart: ScoreBundle,
}

impl ScoreSet {
    pub fn artery(&self, a: Artery) -> &ScoreBundle {
        &self.per_artery[a.slot()]
    }
}

/// Lesion, artery and whole-heart bundles; arteries without lesions are zero.
pub fn aggregate_scores(
    lesions: &[LesionComponent],
    v: &Volume,
    cfg: &ScoringConfig,
) -> Result<ScoreSet, ScoreError> {
    let per_lesion = lesions
        .iter()
        .map(|l| score_lesion(l, v, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let mut per_artery = Artery::ALL.map(|a| ScoreBundle::zero(Scope::Artery(a)));
    for (l, b) in lesions.iter().zip(&per_lesion) {
        per_artery[l.artery.slot()].accumulate(b);
    }
    let mut heart = ScoreBundle::zero(Scope::Heart);
    for b in &per_artery {
        heart.accumulate(b);
    }
    Ok(ScoreSet {
        per_lesion,
        per_artery,
        heart,
    })
}

pub fn num_art_calc(lesions: &[LesionComponent]) -> usize {
    let mut seen = [false; 4];
    for l in lesions {
        seen[l.artery.slot()] = true;
    }
    seen.iter().filter(|&&s| s).count()
}

/// Total lesion footprint over all slices.
pub fn area_2d_total(lesions: &[LesionComponent]) -> f64 {
    lesions.iter().map(|l| l.per_slice_area.values().sum::<f64>()).sum()
}

/// Per-patient JSON score report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScoreReport {
    pub patient_id: String,
    pub per_artery: BTreeMap<String, ScoreBundle>,
    pub heart: ScoreBundle,
}

impl ScoreReport {
    pub fn new(patient_id: impl Into<String>, scores: &ScoreSet) -> Self {
        Self {
            patient_id: patient_id.into(),
            per_artery: Artery::ALL
                .iter()
                .map(|a| (a.name().to_string(), *scores.artery(*a)))
                .collect(),
            heart: scores.heart,
        }
    }
}
