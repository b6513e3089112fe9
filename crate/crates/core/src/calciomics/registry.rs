//! The ordered, versioned list of per-patient features.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::volgrid::Artery as Vessel;

pub const REGISTRY_VERSION: &str = "calciomics-registry/1";

pub const CLINICAL_FEATURES: [&str; 4] = ["age", "female", "diabetes", "smoking"];
pub const AGATSTON_FEATURE: &str = "AgatstonScore2D";
pub const MASS_HIST_BINS: usize = 5;
pub const HU_HIST_BINS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureScale {
    Clinical,
    Heart,
    Artery,
    LesionAggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    pub scale: FeatureScale,
    pub definition: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRegistry {
    pub version: String,
    pub features: Vec<FeatureDef>,
}

pub fn mass_hist_name(bin: usize) -> String {
    format!("massHist{}", bin + 1)
}

pub fn hu_hist_name(bin: usize) -> String {
    format!("HUHeartHist.{}", bin + 1)
}

impl FeatureRegistry {
    /// The standard registry used by the extractor.
    pub fn standard() -> Self {
        let mut features = Vec::new();
        let mut push = |name: String, scale: FeatureScale, definition: &str| {
            features.push(FeatureDef {
                name,
                scale,
                definition: definition.to_string(),
            })
        };
        use FeatureScale::*;

        push("age".into(), Clinical, "age in years");
        push("female".into(), Clinical, "1 if female else 0");
        push("diabetes".into(), Clinical, "1 if diabetes mellitus else 0");
        push("smoking".into(), Clinical, "1 if smoking history else 0");

        push(AGATSTON_FEATURE.into(), Heart, "sum over lesions and slices of area x density weight(slice peak HU)");
        push("AgatstonScore3D".into(), Heart, "sum over lesions of density weight(lesion peak HU) x lesion volume");
        push("MassScore".into(), Heart, "sum over lesions of c x mean HU x volume");
        push("VolumeScore".into(), Heart, "total lesion volume, mm^3");
        push("Area2D".into(), Heart, "total lesion area summed over all slices, mm^2");
        push("numArtCalc".into(), Heart, "number of arteries holding at least one lesion");
        push("numLesions".into(), Heart, "number of lesions");
        for stat in ["mean", "sd", "skewness", "kurtosis", "min", "max"] {
            push(format!("HUHeart.{stat}"), Heart, "first-order statistic of pooled lesion HU, whole heart");
        }
        for b in 0..HU_HIST_BINS {
            push(hu_hist_name(b), Heart, "normalized frequency of pooled lesion HU in 8 equal bins over [130, 1024]");
        }

        for a in Vessel::ALL {
            let n = a.name();
            push(format!("AgatstonScorePerArtery2D.{n}"), Artery, "per-slice Agatston score of the artery's lesions");
            push(format!("AgatstonScorePerArtery3D.{n}"), Artery, "lesion-peak weight x volume, summed over the artery's lesions");
            push(format!("MassScorePerArtery.{n}"), Artery, "mass score of the artery's lesions");
            push(format!("VolumeScorePerArtery.{n}"), Artery, "volume of the artery's lesions, mm^3");
            push(format!("lesionCount.{n}"), Artery, "number of lesions in the artery");
            push(format!("present.{n}"), Artery, "1 if the artery holds a lesion else 0");
            for stat in ["mean", "sd", "skewness", "kurtosis"] {
                push(
                    format!("HUperArtery.{n}.{stat}"),
                    Artery,
                    "first-order statistic of pooled lesion HU in the artery; 0 when absent",
                );
            }
        }

        let lesion_aggregates: [(&str, &str); 20] = [
            ("lesion.voxelCount.mean", "mean lesion voxel count"),
            ("lesion.voxelCount.max", "largest lesion voxel count"),
            ("lesion.maxSliceArea.max", "largest single-slice lesion footprint, mm^2"),
            ("lesion.elongation.mean", "mean sqrt(l2/l1) of voxel-position covariance eigenvalues"),
            ("lesion.flatness.mean", "mean sqrt(l3/l1) of voxel-position covariance eigenvalues"),
            ("lesion.bboxFill.mean", "mean voxel count / bounding-box voxel count"),
            ("lesion.meanHU.mean", "mean of lesion mean HU"),
            ("lesion.peakHU.max", "highest lesion peak HU"),
            ("lesion.minHU.min", "lowest lesion minimum HU"),
            ("lesion.sdHU.mean", "mean of lesion HU standard deviation"),
            ("lesion.skewness.mean", "mean of lesion HU skewness"),
            ("lesion.kurtosis.mean", "mean of lesion HU excess kurtosis"),
            ("lesion.energy.mean", "mean of lesion sum of squared normalized HU"),
            ("lesion.glcm.contrast.mean", "mean GLCM contrast over lesions"),
            ("lesion.glcm.correlation.mean", "mean GLCM correlation over lesions"),
            ("lesion.glcm.energy.mean", "mean GLCM angular second moment over lesions"),
            ("lesion.glcm.homogeneity.mean", "mean GLCM homogeneity over lesions"),
            ("lesion.mass.mean", "mean lesion mass score"),
            ("lesion.mass.max", "largest lesion mass score"),
            ("lesion.volume.mean", "mean lesion volume, mm^3"),
        ];
        for (name, def) in lesion_aggregates {
            push(name.into(), LesionAggregate, def);
        }
        let spatial: [(&str, &str); 5] = [
            ("spatial.meanNNdist", "mean nearest-neighbour lesion centroid distance, mm"),
            ("spatial.maxNNdist", "largest nearest-neighbour lesion centroid distance, mm"),
            ("spatial.centroidSpread", "mean distance of lesion centroids from their common centroid, mm"),
            ("spatial.relPos.mean", "mean centroid offset normalized by the all-lesion bounding-box diagonal"),
            ("spatial.relPos.max", "largest centroid offset normalized by the all-lesion bounding-box diagonal"),
        ];
        for (name, def) in spatial {
            push(name.into(), LesionAggregate, def);
        }
        for b in 0..MASS_HIST_BINS {
            push(
                mass_hist_name(b),
                LesionAggregate,
                "lesions whose mass score falls in this training-fold quintile bin",
            );
        }

        Self {
            version: REGISTRY_VERSION.to_string(),
            features,
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// SHA-256 over version, names, scales and definitions.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.version.as_bytes());
        for f in &self.features {
            h.update([0u8]);
            h.update(f.name.as_bytes());
            h.update([0u8]);
            h.update(format!("{:?}", f.scale).as_bytes());
            h.update([0u8]);
            h.update(f.definition.as_bytes());
        }
        hex::encode(h.finalize())
    }
}
