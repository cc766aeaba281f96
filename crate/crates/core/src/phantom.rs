//! Procedural abdominal CT phantoms with per-voxel class labels.
//!
//! Geometry is continuous (millimetres relative to the volume centre) and is
//! rasterised per slice, so neighbouring slices of the same volume share
//! anatomy the way real scans do.

use std::f64::consts::PI;

use ndarray::{s, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{
    boundary_band, check_dims, AnnotatedSlice, ClassId, CtSlice, DatasetSplit, ImageClass,
    LabelMap, PixelSpacing, SlicePack, DEFAULT_BOUNDARY_WIDTH, HU_MAX, HU_MIN,
};
use crate::error::{Error, Result};
use crate::seed::{derive, substream, tag};

/// Per-volume voxel spacing is drawn uniformly from these inclusive ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacingRange {
    pub in_plane_mm: (f64, f64),
    pub thickness_mm: (f64, f64),
}

impl Default for SpacingRange {
    fn default() -> Self {
        Self {
            in_plane_mm: PixelSpacing::IN_PLANE_RANGE,
            thickness_mm: PixelSpacing::THICKNESS_RANGE,
        }
    }
}

impl SpacingRange {
    pub fn fixed(spacing: PixelSpacing) -> Result<Self> {
        if spacing.sx != spacing.sy {
            return Err(Error::Config("phantom spacing must be square in-plane".into()));
        }
        Ok(Self {
            in_plane_mm: (spacing.sx, spacing.sx),
            thickness_mm: (spacing.slice_thickness, spacing.slice_thickness),
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<PixelSpacing> {
        let s = uniform(rng, self.in_plane_mm);
        let t = uniform(rng, self.thickness_mm);
        PixelSpacing::new(s, s, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `(nx, ny, nz)` voxels.
    pub volume_dims: (usize, usize, usize),
    pub spacing: SpacingRange,
    /// Inclusive range of lesion counts in a lesion-bearing volume.
    pub lesions_per_volume: (usize, usize),
    /// Probabilities of metastasis, hemangioma, cyst.
    pub lesion_type_mix: [f64; 3],
    pub healthy_fraction: f64,
    pub noise_sigma: f64,
    pub boundary_width: usize,
    /// Labeled slices drawn from each volume.
    pub centers_per_volume: usize,
    /// Unlabeled neighbours on each side of a labeled slice.
    pub neighbors_per_side: usize,
    pub seed: u64,
}

/// Image-class counts of the clinical training set this phantom imitates:
/// metastasis, hemangioma, cyst, healthy.
pub const REFERENCE_CLASS_COUNTS: [u32; 4] = [64, 48, 51, 62];

impl Default for PhantomSpec {
    fn default() -> Self {
        let [m, h, c, healthy] = REFERENCE_CLASS_COUNTS.map(f64::from);
        let lesion = m + h + c;
        Self {
            volume_dims: (64, 64, 12),
            spacing: SpacingRange::default(),
            lesions_per_volume: (2, 3),
            lesion_type_mix: [m / lesion, h / lesion, c / lesion],
            healthy_fraction: healthy / (lesion + healthy),
            noise_sigma: 6.0,
            boundary_width: DEFAULT_BOUNDARY_WIDTH,
            centers_per_volume: 2,
            neighbors_per_side: 1,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (nx, ny, nz) = self.volume_dims;
        check_dims(ny, nx)?;
        let k = self.neighbors_per_side;
        if k == 0 {
            return Err(Error::Config("neighbors_per_side must be at least 1".into()));
        }
        if nz < 5 || nz < 2 * k + 1 {
            return Err(Error::Config(format!("nz = {nz} leaves no room for adjacent slices")));
        }
        if self.centers_per_volume == 0 {
            return Err(Error::Config("centers_per_volume must be at least 1".into()));
        }
        let sum: f64 = self.lesion_type_mix.iter().sum();
        if self.lesion_type_mix.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "lesion_type_mix {:?} must be non-negative and sum to 1",
                self.lesion_type_mix
            )));
        }
        if !(0.0..=1.0).contains(&self.healthy_fraction) {
            return Err(Error::Config(format!(
                "healthy_fraction {} outside [0, 1]",
                self.healthy_fraction
            )));
        }
        let (lo, hi) = self.lesions_per_volume;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad lesions_per_volume {:?}", self.lesions_per_volume)));
        }
        let (slo, shi) = self.spacing.in_plane_mm;
        let (tlo, thi) = self.spacing.thickness_mm;
        if !(slo > 0.0 && slo <= shi && tlo > 0.0 && tlo <= thi) {
            return Err(Error::Config(format!("bad spacing range {:?}", self.spacing)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if self.boundary_width == 0 {
            return Err(Error::Config("boundary_width must be at least 1".into()));
        }
        Ok(())
    }

    /// Relative frequency of each volume type, ordered as [`ImageClass::ALL`].
    pub fn class_weights(&self) -> [f64; 4] {
        let l = 1.0 - self.healthy_fraction;
        let [m, h, c] = self.lesion_type_mix;
        [l * m, l * h, l * c, self.healthy_fraction]
    }

    /// Largest-remainder apportionment of `n` volumes to the volume types.
    pub fn class_quota(&self, n: usize) -> [usize; 4] {
        let w = self.class_weights();
        let total: f64 = w.iter().sum();
        let exact: Vec<f64> = w.iter().map(|x| x / total * n as f64).collect();
        let mut quota = [0usize; 4];
        for (q, e) in quota.iter_mut().zip(&exact) {
            *q = (e + 1e-9).floor() as usize;
        }
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - quota[a] as f64;
            let rb = exact[b] - quota[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let mut left = n - quota.iter().sum::<usize>();
        for i in order {
            if left == 0 {
                break;
            }
            quota[i] += 1;
            left -= 1;
        }
        quota
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomVolume {
    /// `(nz, ny, nx)` Hounsfield units.
    pub hu: Array3<f32>,
    /// `(nz, ny, nx)` class codes.
    pub labels: Array3<u8>,
    pub spacing: PixelSpacing,
    pub volume_id: String,
    /// Lesion type of the volume, or healthy.
    pub kind: ImageClass,
    /// Slices planned as labeled centres, each crossing a lesion when the
    /// volume has one.
    pub planned_centers: Vec<usize>,
}

impl PhantomVolume {
    pub fn depth(&self) -> usize {
        self.hu.dim().0
    }

    pub fn slice(&self, z: usize) -> CtSlice {
        CtSlice::new(
            self.hu.slice(s![z, .., ..]).to_owned(),
            self.spacing,
            self.volume_id.clone(),
            z,
        )
        .expect("generator emits valid slices")
    }

    pub fn label_map(&self, z: usize) -> LabelMap {
        LabelMap::new(self.labels.slice(s![z, .., ..]).to_owned()).expect("generator emits valid codes")
    }

    pub fn annotated(&self, z: usize) -> AnnotatedSlice {
        AnnotatedSlice::new(self.slice(z), self.label_map(z)).expect("matching dims")
    }

    pub fn liver_mask(&self, z: usize) -> Array2<bool> {
        self.labels.slice(s![z, .., ..]).mapv(|c| c != ClassId::Background.code())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Band-limited random field with values in [-1, 1].
struct Field {
    waves: Vec<([f64; 3], f64)>,
}

impl Field {
    fn new(rng: &mut ChaCha8Rng, wavelength_mm: (f64, f64), planar: bool) -> Self {
        let waves = (0..3)
            .map(|_| {
                let k = 2.0 * PI / uniform(rng, wavelength_mm);
                let theta = rng.random_range(0.0..2.0 * PI);
                let kz = if planar { 0.0 } else { k * rng.random_range(-0.3..0.3) };
                ([k * theta.cos(), k * theta.sin(), kz], rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let sum: f64 = self
            .waves
            .iter()
            .map(|(k, phase)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos())
            .sum();
        sum / self.waves.len() as f64
    }
}

/// Smooth radial perturbation `1 + sum a_k cos(k theta + phi_k + omega_k z)`.
struct Wobble {
    terms: Vec<(f64, f64, f64, f64)>,
}

impl Wobble {
    fn new(rng: &mut ChaCha8Rng, orders: std::ops::RangeInclusive<u32>, amp: f64, omega: f64) -> Self {
        let terms = orders
            .map(|k| {
                (
                    k as f64,
                    rng.random_range(0.0..amp),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(-omega..=omega),
                )
            })
            .collect();
        Self { terms }
    }

    fn at(&self, theta: f64, z: f64) -> f64 {
        1.0 + self
            .terms
            .iter()
            .map(|&(k, a, phi, w)| a * (k * theta + phi + w * z).cos())
            .sum::<f64>()
    }
}

struct Liver {
    center: [f64; 2],
    drift: [f64; 2],
    semi: [f64; 2],
    z_extent: f64,
    wobble: Wobble,
}

impl Liver {
    fn scale_at(&self, z: f64) -> f64 {
        (1.0 - (z / self.z_extent).powi(2)).max(0.0).sqrt()
    }

    /// Normalised radius; inside when below 1.
    fn rho(&self, x: f64, y: f64, z: f64) -> f64 {
        let u = (x - self.center[0] - self.drift[0] * z) / self.semi[0];
        let v = (y - self.center[1] - self.drift[1] * z) / self.semi[1];
        let r = (u * u + v * v).sqrt();
        r / (self.scale_at(z) * self.wobble.at(v.atan2(u), z)).max(1e-9)
    }
}

struct Lesion {
    center: [f64; 3],
    semi: [f64; 3],
    wobble: Wobble,
}

impl Lesion {
    fn rho(&self, x: f64, y: f64, z: f64) -> f64 {
        let u = (x - self.center[0]) / self.semi[0];
        let v = (y - self.center[1]) / self.semi[1];
        let w = (z - self.center[2]) / self.semi[2];
        (u * u + v * v + w * w).sqrt() / self.wobble.at(v.atan2(u), 0.0)
    }
}

/// Well-separated centre slices in `[k, nz - 1 - k]`.
fn choose_centers(rng: &mut ChaCha8Rng, nz: usize, k: usize, count: usize) -> Vec<usize> {
    let candidates: Vec<usize> = (k..nz - k).collect();
    let gap = 2 * k + 1;
    for _ in 0..200 {
        let mut picked: Vec<usize> = Vec::new();
        let mut pool = candidates.clone();
        while picked.len() < count && !pool.is_empty() {
            let z = pool.swap_remove(rng.random_range(0..pool.len()));
            if picked.iter().all(|&p| p.abs_diff(z) >= gap) {
                picked.push(z);
            }
        }
        if picked.len() == count {
            picked.sort_unstable();
            return picked;
        }
    }
    // too many centres for the depth: fall back to an even stride
    let mut z = k;
    let mut out = Vec::new();
    while z < nz - k && out.len() < count {
        out.push(z);
        z += gap;
    }
    out
}

fn sample_kind(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> ImageClass {
    let w = spec.class_weights();
    let mut u = rng.random_range(0.0..1.0) * w.iter().sum::<f64>();
    for (kind, wi) in ImageClass::ALL.into_iter().zip(w) {
        if u < wi {
            return kind;
        }
        u -= wi;
    }
    ImageClass::Healthy
}

/// Generates one volume; the volume type is drawn from the spec's class mix.
pub fn generate_volume(spec: &PhantomSpec, seed: u64) -> Result<PhantomVolume> {
    spec.validate()?;
    let kind = sample_kind(spec, &mut substream(seed, &[tag("kind")]));
    synthesize(spec, seed, format!("vol-{seed:016x}"), kind)
}

/// Generates one volume of a fixed type.
pub fn generate_volume_of(
    spec: &PhantomSpec,
    seed: u64,
    volume_id: impl Into<String>,
    kind: ImageClass,
) -> Result<PhantomVolume> {
    spec.validate()?;
    synthesize(spec, seed, volume_id.into(), kind)
}

fn synthesize(spec: &PhantomSpec, seed: u64, volume_id: String, kind: ImageClass) -> Result<PhantomVolume> {
    let mut rng = substream(seed, &[tag("geometry")]);
    let (nx, ny, nz) = spec.volume_dims;
    let spacing = spec.spacing.sample(&mut rng)?;
    let (s, t) = (spacing.sx, spacing.slice_thickness);
    let coord = |i: usize, n: usize, step: f64| (i as f64 - (n as f64 - 1.0) / 2.0) * step;
    let fov = [nx as f64 * s, ny as f64 * s];
    let half_depth = nz as f64 * t / 2.0;

    let liver = Liver {
        center: [uniform(&mut rng, (-0.04, 0.04)) * fov[0], uniform(&mut rng, (-0.04, 0.04)) * fov[1]],
        drift: [uniform(&mut rng, (-0.04, 0.04)), uniform(&mut rng, (-0.04, 0.04))],
        semi: [uniform(&mut rng, (0.30, 0.36)) * fov[0], uniform(&mut rng, (0.26, 0.32)) * fov[1]],
        z_extent: uniform(&mut rng, (3.0, 4.0)) * half_depth,
        wobble: Wobble::new(&mut rng, 2..=4, 0.05, 0.01),
    };
    let planned_centers = choose_centers(&mut rng, nz, spec.neighbors_per_side, spec.centers_per_volume);

    let mut lesions = Vec::new();
    if kind != ImageClass::Healthy {
        let count = rng.random_range(spec.lesions_per_volume.0..=spec.lesions_per_volume.1);
        for i in 0..count {
            let zi = match planned_centers.get(i) {
                Some(&z) => z,
                None => rng.random_range(0..nz),
            };
            let lz = coord(zi, nz, t);
            let scale = liver.scale_at(lz);
            let room = liver.semi[0].min(liver.semi[1]) * scale * 0.9 - (spec.boundary_width as f64 + 1.0) * s;
            let r = uniform(&mut rng, (7.0, 10.0)).min(0.7 * room);
            let semi = [
                r * uniform(&mut rng, (0.85, 1.15)),
                r * uniform(&mut rng, (0.85, 1.15)),
                (r * uniform(&mut rng, (0.8, 1.2))).max(2.2 * t),
            ];
            let slack = (room - 1.15 * r * 1.1).max(0.0);
            let dist = slack * rng.random_range(0.0f64..1.0).sqrt();
            let ang = rng.random_range(0.0..2.0 * PI);
            let base = [liver.center[0] + liver.drift[0] * lz, liver.center[1] + liver.drift[1] * lz];
            lesions.push(Lesion {
                center: [base[0] + dist * ang.cos(), base[1] + dist * ang.sin(), lz],
                semi,
                wobble: Wobble::new(&mut rng, 2..=3, 0.08, 0.0),
            });
        }
    }
    let lesion_class = kind.lesion_class();

    let background = Field::new(&mut rng, (12.0, 30.0), false);
    let parenchyma = Field::new(&mut rng, (10.0, 25.0), false);
    let texture = Field::new(&mut rng, (3.0, 7.0), false);

    let mut labels = Array3::<u8>::zeros((nz, ny, nx));
    let mut hu = Array3::<f32>::zeros((nz, ny, nx));
    let mut noise_rng = substream(seed, &[tag("noise")]);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;

    for zi in 0..nz {
        let z = coord(zi, nz, t);
        let liver_mask =
            Array2::from_shape_fn((ny, nx), |(yi, xi)| liver.rho(coord(xi, nx, s), coord(yi, ny, s), z) <= 1.0);
        let band = boundary_band(&liver_mask, spec.boundary_width)?;
        let mut lesion_rho = Array2::from_elem((ny, nx), f64::INFINITY);
        if !lesions.is_empty() {
            for ((yi, xi), r) in lesion_rho.indexed_iter_mut() {
                if liver_mask[[yi, xi]] && !band[[yi, xi]] {
                    let (x, y) = (coord(xi, nx, s), coord(yi, ny, s));
                    *r = lesions.iter().map(|l| l.rho(x, y, z)).fold(f64::INFINITY, f64::min);
                }
            }
        }
        for yi in 0..ny {
            for xi in 0..nx {
                let p = [coord(xi, nx, s), coord(yi, ny, s), z];
                let rho = lesion_rho[[yi, xi]];
                let (class, value) = if rho <= 1.0 {
                    let class = lesion_class.expect("lesions only in lesion volumes");
                    let v = match class {
                        ClassId::Cyst => 10.0 + 3.0 * parenchyma.at(p),
                        ClassId::Metastasis => 50.0 + 10.0 * texture.at(p),
                        _ if rho > 0.72 => 140.0 + 8.0 * texture.at(p),
                        _ => 66.0 + 4.0 * texture.at(p),
                    };
                    (class, v)
                } else if band[[yi, xi]] {
                    (ClassId::LiverBoundary, 100.0 + 5.0 * parenchyma.at(p))
                } else if liver_mask[[yi, xi]] {
                    (ClassId::Liver, 100.0 + 5.0 * parenchyma.at(p))
                } else {
                    (ClassId::Background, -20.0 + 75.0 * background.at(p))
                };
                labels[[zi, yi, xi]] = class.code();
                let noisy = value + noise.sample(&mut noise_rng);
                hu[[zi, yi, xi]] = (noisy.round() as f32).clamp(HU_MIN, HU_MAX);
            }
        }
    }

    Ok(PhantomVolume {
        hu,
        labels,
        spacing,
        volume_id,
        kind,
        planned_centers,
    })
}

/// Labeled slice `z` with `k` unlabeled neighbours on each side.
pub fn slice_pack_at(volume: &PhantomVolume, z: usize, k: usize) -> Result<SlicePack> {
    let nz = volume.depth();
    if k == 0 || z < k || z + k >= nz {
        return Err(Error::InvalidValue(format!(
            "centre slice {z} needs {k} neighbours on each side within 0..{nz}"
        )));
    }
    let adjacent = (1..=k)
        .flat_map(|d| [z - d, z + d])
        .map(|zz| volume.slice(zz))
        .collect();
    Ok(SlicePack {
        labeled: volume.annotated(z),
        adjacent,
    })
}

/// Centre slices of a volume: planned ones first, then other liver slices.
/// Empty when no usable slice crosses the liver.
pub fn select_centers(volume: &PhantomVolume, count: usize, k: usize) -> Vec<usize> {
    let nz = volume.depth();
    if nz < 2 * k + 1 {
        return Vec::new();
    }
    let has_liver = |z: usize| volume.liver_mask(z).iter().any(|&v| v);
    let mut out: Vec<usize> = volume
        .planned_centers
        .iter()
        .copied()
        .filter(|&z| z >= k && z + k < nz && has_liver(z))
        .take(count)
        .collect();
    for z in k..nz - k {
        if out.len() >= count {
            break;
        }
        if !out.contains(&z) && has_liver(z) {
            out.push(z);
        }
    }
    out.sort_unstable();
    out
}

pub fn extract_slice_packs(volume: &PhantomVolume, centers_per_volume: usize) -> Vec<SlicePack> {
    extract_slice_packs_k(volume, centers_per_volume, 1)
}

pub fn extract_slice_packs_k(volume: &PhantomVolume, centers_per_volume: usize, k: usize) -> Vec<SlicePack> {
    select_centers(volume, centers_per_volume, k)
        .into_iter()
        .map(|z| slice_pack_at(volume, z, k).expect("selected centres are in range"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Test,
}

impl SplitRole {
    pub fn name(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Test => "test",
        }
    }
}

/// Volume types for one split, apportioned by quota and shuffled.
fn split_kinds(spec: &PhantomSpec, n: usize, seed: u64, role: SplitRole) -> Vec<ImageClass> {
    let quota = spec.class_quota(n);
    let mut kinds: Vec<ImageClass> = ImageClass::ALL
        .into_iter()
        .zip(quota)
        .flat_map(|(k, q)| std::iter::repeat_n(k, q))
        .collect();
    let mut rng = substream(seed, &[tag(role.name()), tag("kinds")]);
    for i in (1..kinds.len()).rev() {
        kinds.swap(i, rng.random_range(0..=i));
    }
    kinds
}

/// All volumes of one split, generated in parallel with per-volume seeds.
pub fn generate_split(spec: &PhantomSpec, n: usize, seed: u64, role: SplitRole) -> Result<Vec<PhantomVolume>> {
    spec.validate()?;
    split_kinds(spec, n, seed, role)
        .into_par_iter()
        .enumerate()
        .map(|(i, kind)| {
            let id = format!("{}-{i:03}", role.name());
            let vseed = derive(seed, &[tag(role.name()), i as u64]);
            synthesize(spec, vseed, id, kind)
        })
        .collect()
}

/// Train packs and test slices from disjoint sets of volumes.
pub fn build_dataset(
    spec: &PhantomSpec,
    n_train_volumes: usize,
    n_test_volumes: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    let (train, test) = build_volumes(spec, n_train_volumes, n_test_volumes, seed)?;
    dataset_from_volumes(spec, &train, &test)
}

pub fn build_volumes(
    spec: &PhantomSpec,
    n_train_volumes: usize,
    n_test_volumes: usize,
    seed: u64,
) -> Result<(Vec<PhantomVolume>, Vec<PhantomVolume>)> {
    if n_train_volumes == 0 || n_test_volumes == 0 {
        return Err(Error::Config("train and test volume counts must be at least 1".into()));
    }
    Ok((
        generate_split(spec, n_train_volumes, seed, SplitRole::Train)?,
        generate_split(spec, n_test_volumes, seed, SplitRole::Test)?,
    ))
}

pub fn dataset_from_volumes(
    spec: &PhantomSpec,
    train: &[PhantomVolume],
    test: &[PhantomVolume],
) -> Result<DatasetSplit> {
    let k = spec.neighbors_per_side;
    let packs = train
        .iter()
        .flat_map(|v| extract_slice_packs_k(v, spec.centers_per_volume, k))
        .collect();
    let test_slices = test
        .iter()
        .flat_map(|v| {
            select_centers(v, spec.centers_per_volume, k)
                .into_iter()
                .map(|z| v.annotated(z))
        })
        .collect();
    DatasetSplit::new(packs, test_slices)
}
