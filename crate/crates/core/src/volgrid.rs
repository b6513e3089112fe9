//! Voxel grids, coronary-artery label maps and calcified-lesion extraction.
//!
//! Grids are stored flat with x varying fastest, then y, then z. The on-disk
//! container is a single JSON header line followed by the raw payload:
//! little-endian `i16` Hounsfield Units for volumes (`CTCSV1`) and one byte
//! per voxel for artery label maps (`CTCSM1`).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lowest representable attenuation (air).
pub const HU_MIN: i16 = -1024;
/// Highest attenuation accepted on load.
pub const HU_MAX: i16 = 3071;

pub const VOLUME_MAGIC: &str = "CTCSV1";
pub const MASK_MAGIC: &str = "CTCSM1";

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("payload has {extra} trailing bytes beyond nx*ny*nz voxels")]
    TrailingBytes { extra: usize },
    #[error("HU value {value} out of range [-1024, 3071] at byte offset {offset}")]
    HuOutOfRange { value: i32, offset: usize },
    #[error("invalid artery label {value} at byte offset {offset}")]
    InvalidLabel { value: u8, offset: usize },
    #[error("dimension mismatch: volume {volume:?} vs label map {mask:?}")]
    DimsMismatch { volume: Dims, mask: Dims },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.nx;
        let y = (i / self.nx) % self.ny;
        let z = i / (self.nx * self.ny);
        [x, y, z]
    }

    fn validate(&self) -> Result<(), VolumeError> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(VolumeError::InvalidGeometry(format!(
                "dims must be positive, got {}x{}x{}",
                self.nx, self.ny, self.nz
            )));
        }
        Ok(())
    }
}

/// Voxel size in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Default for Spacing {
    /// 0.5 x 0.5 mm in-plane, 2.5 mm slices.
    fn default() -> Self {
        Self { dx: 0.5, dy: 0.5, dz: 2.5 }
    }
}

impl Spacing {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Self {
        Self { dx, dy, dz }
    }

    pub fn voxel_volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }

    pub fn pixel_area(&self) -> f64 {
        self.dx * self.dy
    }

    /// Physical position of a voxel centre.
    pub fn center_mm(&self, [x, y, z]: [usize; 3]) -> [f64; 3] {
        [
            (x as f64 + 0.5) * self.dx,
            (y as f64 + 0.5) * self.dy,
            (z as f64 + 0.5) * self.dz,
        ]
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.dx) && ok(self.dy) && ok(self.dz)) {
            return Err(VolumeError::InvalidGeometry(format!(
                "spacing must be positive and finite, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// Coronary artery territories. Label code 0 means "no artery".
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Artery {
    LM = 1,
    LAD = 2,
    LCX = 3,
    RCA = 4,
}

impl Artery {
    pub const ALL: [Artery; 4] = [Artery::LM, Artery::LAD, Artery::LCX, Artery::RCA];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Artery::LM),
            2 => Some(Artery::LAD),
            3 => Some(Artery::LCX),
            4 => Some(Artery::RCA),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Artery::LM => "LM",
            Artery::LAD => "LAD",
            Artery::LCX => "LCX",
            Artery::RCA => "RCA",
        }
    }

    /// Position in [`Artery::ALL`].
    pub fn slot(self) -> usize {
        self as usize - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    hu: Vec<i16>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, hu: Vec<i16>) -> Result<Self, VolumeError> {
        dims.validate()?;
        spacing.validate()?;
        if hu.len() != dims.len() {
            return Err(VolumeError::InvalidGeometry(format!(
                "hu has {} values, dims require {}",
                hu.len(),
                dims.len()
            )));
        }
        if let Some(i) = hu.iter().position(|&v| !(HU_MIN..=HU_MAX).contains(&v)) {
            return Err(VolumeError::HuOutOfRange {
                value: hu[i] as i32,
                offset: 2 * i,
            });
        }
        Ok(Self { dims, spacing, hu })
    }

    /// A volume filled with a single value.
    pub fn filled(dims: Dims, spacing: Spacing, value: i16) -> Result<Self, VolumeError> {
        Self::new(dims, spacing, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn hu(&self) -> &[i16] {
        &self.hu
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> i16 {
        self.hu[self.dims.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: i16) {
        assert!((HU_MIN..=HU_MAX).contains(&value), "HU {value} out of range");
        let i = self.dims.index(x, y, z);
        self.hu[i] = value;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArteryLabelMap {
    dims: Dims,
    labels: Vec<u8>,
}

impl ArteryLabelMap {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self, VolumeError> {
        dims.validate()?;
        if labels.len() != dims.len() {
            return Err(VolumeError::InvalidGeometry(format!(
                "label map has {} values, dims require {}",
                labels.len(),
                dims.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&v| v > 4) {
            return Err(VolumeError::InvalidLabel {
                value: labels[i],
                offset: i,
            });
        }
        Ok(Self { dims, labels })
    }

    pub fn empty(dims: Dims) -> Result<Self, VolumeError> {
        Self::new(dims, vec![0; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.dims.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, artery: Option<Artery>) {
        let i = self.dims.index(x, y, z);
        self.labels[i] = artery.map_or(0, Artery::code);
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    magic: String,
    nx: usize,
    ny: usize,
    nz: usize,
    dx: f64,
    dy: f64,
    dz: f64,
    dtype: String,
}

fn encode_header(magic: &str, dims: Dims, spacing: Spacing, dtype: &str) -> Vec<u8> {
    let header = FileHeader {
        magic: magic.to_string(),
        nx: dims.nx,
        ny: dims.ny,
        nz: dims.nz,
        dx: spacing.dx,
        dy: spacing.dy,
        dz: spacing.dz,
        dtype: dtype.to_string(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out
}

/// Splits a container into (dims, spacing, payload, header length).
fn decode_header<'a>(
    bytes: &'a [u8],
    magic: &str,
    dtype: &str,
) -> Result<(Dims, Spacing, &'a [u8], usize), VolumeError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| VolumeError::MalformedHeader("missing header terminator".into()))?;
    let text = std::str::from_utf8(&bytes[..nl])
        .map_err(|e| VolumeError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let header: FileHeader =
        serde_json::from_str(text).map_err(|e| VolumeError::MalformedHeader(e.to_string()))?;
    if header.magic != magic {
        return Err(VolumeError::MalformedHeader(format!(
            "expected magic {magic:?}, found {:?}",
            header.magic
        )));
    }
    if header.dtype != dtype {
        return Err(VolumeError::MalformedHeader(format!(
            "expected dtype {dtype:?}, found {:?}",
            header.dtype
        )));
    }
    let dims = Dims::new(header.nx, header.ny, header.nz);
    let spacing = Spacing::new(header.dx, header.dy, header.dz);
    dims.validate()?;
    spacing.validate()?;
    Ok((dims, spacing, &bytes[nl + 1..], nl + 1))
}

fn check_payload_len(payload: usize, expected: usize) -> Result<(), VolumeError> {
    match payload.cmp(&expected) {
        std::cmp::Ordering::Less => Err(VolumeError::TruncatedPayload {
            expected,
            actual: payload,
        }),
        std::cmp::Ordering::Greater => Err(VolumeError::TrailingBytes {
            extra: payload - expected,
        }),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = encode_header(VOLUME_MAGIC, v.dims, v.spacing, "i16le");
    out.reserve(v.hu.len() * 2);
    for &h in &v.hu {
        out.extend_from_slice(&h.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume, VolumeError> {
    let (dims, spacing, payload, header_len) = decode_header(bytes, VOLUME_MAGIC, "i16le")?;
    check_payload_len(payload.len(), dims.len() * 2)?;
    let mut hu = Vec::with_capacity(dims.len());
    for (i, pair) in payload.chunks_exact(2).enumerate() {
        let value = i16::from_le_bytes([pair[0], pair[1]]);
        if !(HU_MIN..=HU_MAX).contains(&value) {
            return Err(VolumeError::HuOutOfRange {
                value: value as i32,
                offset: header_len + 2 * i,
            });
        }
        hu.push(value);
    }
    Ok(Volume { dims, spacing, hu })
}

pub fn encode_label_map(m: &ArteryLabelMap, spacing: Spacing) -> Vec<u8> {
    let mut out = encode_header(MASK_MAGIC, m.dims, spacing, "u8");
    out.extend_from_slice(&m.labels);
    out
}

pub fn decode_label_map(bytes: &[u8]) -> Result<ArteryLabelMap, VolumeError> {
    let (dims, _spacing, payload, header_len) = decode_header(bytes, MASK_MAGIC, "u8")?;
    check_payload_len(payload.len(), dims.len())?;
    if let Some(i) = payload.iter().position(|&v| v > 4) {
        return Err(VolumeError::InvalidLabel {
            value: payload[i],
            offset: header_len + i,
        });
    }
    Ok(ArteryLabelMap {
        dims,
        labels: payload.to_vec(),
    })
}

/// Reads a `CTCSV1` volume. Raw HU values are returned untouched.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    decode_volume(&fs::read(path)?)
}

pub fn save_volume(path: impl AsRef<Path>, v: &Volume) -> Result<(), VolumeError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_volume(v))?;
    Ok(())
}

pub fn load_label_map(path: impl AsRef<Path>) -> Result<ArteryLabelMap, VolumeError> {
    decode_label_map(&fs::read(path)?)
}

pub fn save_label_map(
    path: impl AsRef<Path>,
    m: &ArteryLabelMap,
    spacing: Spacing,
) -> Result<(), VolumeError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_label_map(m, spacing))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub clip_lo: i16,
    pub clip_hi: i16,
    pub normalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clip_lo: -1024,
            clip_hi: 1024,
            normalize: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.clip_lo >= self.clip_hi {
            return Err(VolumeError::InvalidConfig(format!(
                "clip_lo ({}) must be below clip_hi ({})",
                self.clip_lo, self.clip_hi
            )));
        }
        Ok(())
    }

    /// Maps one HU value through the clip (and optional rescale to [0, 1]).
    #[inline]
    pub fn apply(&self, hu: i16) -> f64 {
        let c = hu.clamp(self.clip_lo, self.clip_hi) as f64;
        if self.normalize {
            (c - self.clip_lo as f64) / (self.clip_hi as f64 - self.clip_lo as f64)
        } else {
            c
        }
    }
}

/// Real-valued grid produced by [`clip_normalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub values: Vec<f64>,
}

pub fn clip_normalize(
    v: &Volume,
    cfg: &PreprocessConfig,
) -> Result<NormalizedVolume, VolumeError> {
    cfg.validate()?;
    Ok(NormalizedVolume {
        dims: v.dims,
        spacing: v.spacing,
        values: v.hu.iter().map(|&h| cfg.apply(h)).collect(),
    })
}

/// Voxel neighbourhood used to join supra-threshold voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Face6,
    Edge18,
    Vertex26,
}

impl Connectivity {
    /// Whether a non-zero offset (each component in -1..=1) is a neighbour.
    pub fn admits(self, dx: i32, dy: i32, dz: i32) -> bool {
        let n = dx.abs() + dy.abs() + dz.abs();
        match self {
            Connectivity::Face6 => n == 1,
            Connectivity::Edge18 => (1..=2).contains(&n),
            Connectivity::Vertex26 => n >= 1,
        }
    }

    /// The neighbour offsets that precede a voxel in scan order.
    fn backward_offsets(self) -> Vec<(i32, i32, i32)> {
        let mut out = Vec::new();
        for dz in -1..=0 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let before = dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0)));
                    if before && self.admits(dx, dy, dz) {
                        out.push((dx, dy, dz));
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(n: u8) -> Result<Self, Self::Error> {
        match n {
            6 => Ok(Connectivity::Face6),
            18 => Ok(Connectivity::Edge18),
            26 => Ok(Connectivity::Vertex26),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Face6 => 6,
            Connectivity::Edge18 => 18,
            Connectivity::Vertex26 => 26,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionConfig {
    pub threshold_hu: i16,
    pub connectivity: Connectivity,
    pub min_lesion_voxels: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            threshold_hu: 130,
            connectivity: Connectivity::Vertex26,
            min_lesion_voxels: 1,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.threshold_hu <= HU_MIN {
            return Err(VolumeError::InvalidConfig(format!(
                "threshold {} must exceed the clip floor {HU_MIN}",
                self.threshold_hu
            )));
        }
        if self.min_lesion_voxels == 0 {
            return Err(VolumeError::InvalidConfig(
                "min_lesion_voxels must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One connected calcified lesion inside a single artery territory.
#[derive(Clone, Debug, PartialEq)]
pub struct LesionComponent {
    pub id: usize,
    pub artery: Artery,
    /// Voxel indices `[x, y, z]` in scan order.
    pub voxels: Vec<[usize; 3]>,
    /// HU of each voxel, aligned with `voxels`.
    pub hu: Vec<i16>,
    /// Area in mm² of the lesion's footprint in each slice z.
    pub per_slice_area: BTreeMap<usize, f64>,
    pub peak_hu: i16,
    pub min_hu: i16,
    pub mean_hu: f64,
    /// Mean voxel-centre position in mm.
    pub centroid: [f64; 3],
}

impl LesionComponent {
    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    /// Peak HU of the lesion voxels lying in slice `z`.
    pub fn slice_peaks(&self) -> BTreeMap<usize, i16> {
        let mut peaks = BTreeMap::new();
        for (v, &h) in self.voxels.iter().zip(&self.hu) {
            peaks
                .entry(v[2])
                .and_modify(|p: &mut i16| *p = (*p).max(h))
                .or_insert(h);
        }
        peaks
    }

    fn from_voxels(artery: Artery, voxels: Vec<[usize; 3]>, v: &Volume) -> Self {
        let spacing = v.spacing;
        let hu: Vec<i16> = voxels.iter().map(|&[x, y, z]| v.get(x, y, z)).collect();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let mut centroid = [0.0; 3];
        for &c in &voxels {
            *counts.entry(c[2]).or_default() += 1;
            let p = spacing.center_mm(c);
            for k in 0..3 {
                centroid[k] += p[k];
            }
        }
        let n = voxels.len() as f64;
        for c in &mut centroid {
            *c /= n;
        }
        let per_slice_area = counts
            .into_iter()
            .map(|(z, c)| (z, c as f64 * spacing.pixel_area()))
            .collect();
        let sum: i64 = hu.iter().map(|&h| h as i64).sum();
        Self {
            id: 0,
            artery,
            peak_hu: *hu.iter().max().expect("lesion is nonempty"),
            min_hu: *hu.iter().min().expect("lesion is nonempty"),
            mean_hu: sum as f64 / n,
            per_slice_area,
            centroid,
            voxels,
            hu,
        }
    }
}

struct DisjointSet {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            let grand = self.parent[self.parent[i as usize] as usize];
            self.parent[i as usize] = grand;
            i = grand;
        }
        i
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (hi, lo) = if self.rank[ra as usize] >= self.rank[rb as usize] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[lo as usize] = hi;
        if self.rank[hi as usize] == self.rank[lo as usize] {
            self.rank[hi as usize] += 1;
        }
    }
}

/// Whether a voxel takes part in lesion extraction: supra-threshold and
/// inside a labelled artery.
pub fn is_candidate(v: &Volume, m: &ArteryLabelMap, i: usize, threshold_hu: i16) -> bool {
    m.labels[i] != 0 && v.hu[i] >= threshold_hu
}

/// Extracts calcified lesions as connected components of supra-threshold
/// voxels, evaluated separately within each artery label.
///
/// Lesions are ordered by artery, then by their first voxel in scan order
/// (smallest z, then y, then x); ids follow that order starting at 0.
pub fn extract_lesions(
    v: &Volume,
    m: &ArteryLabelMap,
    cfg: &ExtractionConfig,
) -> Result<Vec<LesionComponent>, VolumeError> {
    cfg.validate()?;
    if v.dims != m.dims {
        return Err(VolumeError::DimsMismatch {
            volume: v.dims,
            mask: m.dims,
        });
    }
    let dims = v.dims;
    let n = dims.len();
    let mut sets = DisjointSet::new(n);
    let offsets = cfg.connectivity.backward_offsets();
    for i in 0..n {
        if !is_candidate(v, m, i, cfg.threshold_hu) {
            continue;
        }
        let [x, y, z] = dims.coords(i);
        for &(ox, oy, oz) in &offsets {
            let (nx, ny, nz) = (x as i64 + ox as i64, y as i64 + oy as i64, z as i64 + oz as i64);
            if nx < 0 || ny < 0 || nz < 0 || nx >= dims.nx as i64 || ny >= dims.ny as i64 {
                continue;
            }
            let j = dims.index(nx as usize, ny as usize, nz as usize);
            if m.labels[j] == m.labels[i] && is_candidate(v, m, j, cfg.threshold_hu) {
                sets.union(i as u32, j as u32);
            }
        }
    }

    // Root -> (first scan index, voxels). Scan order makes voxel lists sorted.
    let mut groups: BTreeMap<u32, (usize, Vec<[usize; 3]>)> = BTreeMap::new();
    for i in 0..n {
        if is_candidate(v, m, i, cfg.threshold_hu) {
            let root = sets.find(i as u32);
            groups
                .entry(root)
                .or_insert_with(|| (i, Vec::new()))
                .1
                .push(dims.coords(i));
        }
    }
    let mut keyed: Vec<(u8, usize, Vec<[usize; 3]>)> = groups
        .into_values()
        .filter(|(_, vox)| vox.len() >= cfg.min_lesion_voxels)
        .map(|(first, vox)| (m.labels[first], first, vox))
        .collect();
    keyed.sort_by_key(|&(label, first, _)| (label, first));

    Ok(keyed
        .into_iter()
        .enumerate()
        .map(|(id, (label, _, vox))| {
            let artery = Artery::from_code(label).expect("candidate voxels carry a label");
            let mut lesion = LesionComponent::from_voxels(artery, vox, v);
            lesion.id = id;
            lesion
        })
        .collect())
}
