//! Lesion-level descriptors: first-order HU statistics, co-occurrence
//! texture, shape and inter-lesion spatial relations.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::volgrid::{LesionComponent, PreprocessConfig, Spacing};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FirstOrder {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
    /// Fisher g1; 0 when the values are constant.
    pub skewness: f64,
    /// Excess kurtosis g2; 0 when the values are constant.
    pub kurtosis: f64,
    /// Sum of squared normalized HU.
    pub energy: f64,
}

/// First-order statistics of a set of HU values. All zero for an empty set.
pub fn first_order(hu: &[i16], pre: &PreprocessConfig) -> FirstOrder {
    if hu.is_empty() {
        return FirstOrder::default();
    }
    let n = hu.len() as f64;
    let mean = hu.iter().map(|&h| h as f64).sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &h in hu {
        let d = h as f64 - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let (skewness, kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    FirstOrder {
        min: *hu.iter().min().unwrap() as f64,
        max: *hu.iter().max().unwrap() as f64,
        mean,
        sd: m2.sqrt(),
        skewness,
        kurtosis,
        energy: hu.iter().map(|&h| pre.apply(h).powi(2)).sum(),
    }
}

pub fn lesion_first_order(l: &LesionComponent, pre: &PreprocessConfig) -> FirstOrder {
    first_order(&l.hu, pre)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlcmConfig {
    pub bins: usize,
    pub lo_hu: i16,
    pub hi_hu: i16,
}

impl Default for GlcmConfig {
    fn default() -> Self {
        Self {
            bins: 8,
            lo_hu: 130,
            hi_hu: 1024,
        }
    }
}

impl GlcmConfig {
    /// Gray level of one HU value, clamped into `0..bins`.
    pub fn level(&self, hu: i16) -> usize {
        let t = (hu as f64 - self.lo_hu as f64) / (self.hi_hu as f64 - self.lo_hu as f64);
        let b = (t * self.bins as f64).floor();
        b.clamp(0.0, (self.bins - 1) as f64) as usize
    }
}

/// Unit offsets along x, y and z.
pub const GLCM_OFFSETS: [[i64; 3]; 3] = [[1, 0, 0], [0, 1, 0], [0, 0, 1]];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlcmFeatures {
    pub contrast: f64,
    pub correlation: f64,
    pub energy: f64,
    pub homogeneity: f64,
}

/// Symmetric, normalized co-occurrence matrix over intra-lesion voxel pairs.
///
/// A lesion with no neighbouring pair yields a single-entry matrix at the
/// gray level of its first voxel.
pub fn glcm_matrix(l: &LesionComponent, cfg: &GlcmConfig) -> Vec<Vec<f64>> {
    let nb = cfg.bins;
    let levels: HashMap<[usize; 3], usize> = l
        .voxels
        .iter()
        .zip(&l.hu)
        .map(|(&v, &h)| (v, cfg.level(h)))
        .collect();
    let mut counts = vec![vec![0u64; nb]; nb];
    let mut total = 0u64;
    for (&v, &a) in &levels {
        for o in GLCM_OFFSETS {
            let n = [v[0] as i64 + o[0], v[1] as i64 + o[1], v[2] as i64 + o[2]];
            if n.iter().any(|&c| c < 0) {
                continue;
            }
            if let Some(&b) = levels.get(&[n[0] as usize, n[1] as usize, n[2] as usize]) {
                counts[a][b] += 1;
                counts[b][a] += 1;
                total += 2;
            }
        }
    }
    let mut p = vec![vec![0.0; nb]; nb];
    if total == 0 {
        let g = cfg.level(l.hu[0]);
        p[g][g] = 1.0;
        return p;
    }
    for i in 0..nb {
        for j in 0..nb {
            p[i][j] = counts[i][j] as f64 / total as f64;
        }
    }
    p
}

/// Haralick-style features of a normalized co-occurrence matrix. A matrix
/// with zero marginal variance has correlation 1.
pub fn glcm_features(p: &[Vec<f64>]) -> GlcmFeatures {
    let nb = p.len();
    let (mut contrast, mut energy, mut homogeneity) = (0.0, 0.0, 0.0);
    let (mut mu_i, mut mu_j) = (0.0, 0.0);
    for i in 0..nb {
        for j in 0..nb {
            let v = p[i][j];
            let d = i as f64 - j as f64;
            contrast += v * d * d;
            energy += v * v;
            homogeneity += v / (1.0 + d * d);
            mu_i += i as f64 * v;
            mu_j += j as f64 * v;
        }
    }
    let (mut var_i, mut var_j, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..nb {
        for j in 0..nb {
            let v = p[i][j];
            let (a, b) = (i as f64 - mu_i, j as f64 - mu_j);
            var_i += a * a * v;
            var_j += b * b * v;
            cov += a * b * v;
        }
    }
    let correlation = if var_i > 1e-15 && var_j > 1e-15 {
        cov / (var_i * var_j).sqrt()
    } else {
        1.0
    };
    GlcmFeatures {
        contrast,
        correlation,
        energy,
        homogeneity,
    }
}

pub fn lesion_second_order(l: &LesionComponent, cfg: &GlcmConfig) -> GlcmFeatures {
    glcm_features(&glcm_matrix(l, cfg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionShape {
    pub voxel_count: usize,
    pub max_slice_area: f64,
    pub elongation: f64,
    pub flatness: f64,
    pub bbox_fill: f64,
}

/// Eigenvalues of the voxel-centre covariance (mm²), descending, with
/// values below `1e-12 * largest` set to zero.
pub fn covariance_eigenvalues(voxels: &[[usize; 3]], spacing: Spacing) -> [f64; 3] {
    let n = voxels.len() as f64;
    let pts: Vec<[f64; 3]> = voxels.iter().map(|&v| spacing.center_mm(v)).collect();
    let mut mean = [0.0; 3];
    for p in &pts {
        for k in 0..3 {
            mean[k] += p[k] / n;
        }
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in &pts {
        for a in 0..3 {
            for b in 0..3 {
                cov[(a, b)] += (p[a] - mean[a]) * (p[b] - mean[b]) / n;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut ev = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    ev.sort_by(|a, b| b.total_cmp(a));
    let top = ev[0].max(0.0);
    for e in &mut ev {
        if *e <= 1e-12 * top {
            *e = 0.0;
        }
    }
    ev[0] = top;
    ev
}

/// Shape descriptors. A lesion with zero spatial extent (a single voxel)
/// has elongation and flatness 1.
pub fn lesion_shape(l: &LesionComponent, spacing: Spacing) -> LesionShape {
    let [l1, l2, l3] = covariance_eigenvalues(&l.voxels, spacing);
    let (elongation, flatness) = if l1 > 0.0 {
        ((l2 / l1).sqrt(), (l3 / l1).sqrt())
    } else {
        (1.0, 1.0)
    };
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for v in &l.voxels {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    let bbox: usize = (0..3).map(|k| hi[k] - lo[k] + 1).product();
    LesionShape {
        voxel_count: l.voxel_count(),
        max_slice_area: l.per_slice_area.values().copied().fold(0.0, f64::max),
        elongation,
        flatness,
        bbox_fill: l.voxel_count() as f64 / bbox as f64,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpatialRelations {
    pub mean_nn_dist: f64,
    pub max_nn_dist: f64,
    pub centroid_spread: f64,
    pub rel_pos_mean: f64,
    pub rel_pos_max: f64,
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Nearest-neighbour distances between lesion centroids and each
/// centroid's offset from the common centroid, the latter normalized by the
/// diagonal of the box enclosing every lesion voxel. Fewer than two lesions
/// give all zeros.
pub fn spatial_relations(lesions: &[LesionComponent], spacing: Spacing) -> SpatialRelations {
    if lesions.len() < 2 {
        return SpatialRelations::default();
    }
    let c: Vec<[f64; 3]> = lesions.iter().map(|l| l.centroid).collect();
    let nn: Vec<f64> = (0..c.len())
        .map(|i| {
            (0..c.len())
                .filter(|&j| j != i)
                .map(|j| dist(c[i], c[j]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let n = c.len() as f64;
    let mut common = [0.0; 3];
    for p in &c {
        for k in 0..3 {
            common[k] += p[k] / n;
        }
    }
    let offsets: Vec<f64> = c.iter().map(|&p| dist(p, common)).collect();

    let step = [spacing.dx, spacing.dy, spacing.dz];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for l in lesions {
        for v in &l.voxels {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k] as f64 * step[k]);
                hi[k] = hi[k].max((v[k] + 1) as f64 * step[k]);
            }
        }
    }
    let diag = dist(lo, hi);

    SpatialRelations {
        mean_nn_dist: nn.iter().sum::<f64>() / n,
        max_nn_dist: nn.iter().copied().fold(0.0, f64::max),
        centroid_spread: offsets.iter().sum::<f64>() / n,
        rel_pos_mean: offsets.iter().sum::<f64>() / n / diag,
        rel_pos_max: offsets.iter().copied().fold(0.0, f64::max) / diag,
    }
}
