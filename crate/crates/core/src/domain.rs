//! Slices, label maps and the six-class liver taxonomy.
//!
//! Every type here is immutable once constructed; constructors validate the
//! invariants so downstream code can rely on them without re-checking.

use std::fmt;

use ndarray::{Array2, Array3, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 6;

/// Lowest and highest representable attenuation (12-bit CT range).
pub const HU_MIN: f32 = -1024.0;
pub const HU_MAX: f32 = 3071.0;

/// Spatial dims must be multiples of this (four 2x2 pooling stages).
pub const DIM_MULTIPLE: usize = 16;

pub const DEFAULT_BOUNDARY_WIDTH: usize = 2;

/// Per-pixel class code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum ClassId {
    Background = 0,
    Liver = 1,
    LiverBoundary = 2,
    Metastasis = 3,
    Hemangioma = 4,
    Cyst = 5,
}

impl ClassId {
    pub const ALL: [ClassId; NUM_CLASSES] = [
        ClassId::Background,
        ClassId::Liver,
        ClassId::LiverBoundary,
        ClassId::Metastasis,
        ClassId::Hemangioma,
        ClassId::Cyst,
    ];

    pub const LESIONS: [ClassId; 3] = [ClassId::Metastasis, ClassId::Hemangioma, ClassId::Cyst];

    pub fn from_code(code: u8) -> Option<ClassId> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn is_lesion(self) -> bool {
        Self::is_lesion_code(self as u8)
    }

    #[inline]
    pub fn is_lesion_code(code: u8) -> bool {
        (3..=5).contains(&code)
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Background => "background",
            ClassId::Liver => "liver",
            ClassId::LiverBoundary => "liver_boundary",
            ClassId::Metastasis => "metastasis",
            ClassId::Hemangioma => "hemangioma",
            ClassId::Cyst => "cyst",
        }
    }
}

/// Whole-image label: the dominant lesion type, or healthy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageClass {
    Metastasis,
    Hemangioma,
    Cyst,
    Healthy,
}

impl ImageClass {
    pub const ALL: [ImageClass; 4] = [
        ImageClass::Metastasis,
        ImageClass::Hemangioma,
        ImageClass::Cyst,
        ImageClass::Healthy,
    ];

    pub fn from_lesion(class: ClassId) -> Option<ImageClass> {
        match class {
            ClassId::Metastasis => Some(ImageClass::Metastasis),
            ClassId::Hemangioma => Some(ImageClass::Hemangioma),
            ClassId::Cyst => Some(ImageClass::Cyst),
            _ => None,
        }
    }

    pub fn lesion_class(self) -> Option<ClassId> {
        match self {
            ImageClass::Metastasis => Some(ClassId::Metastasis),
            ImageClass::Hemangioma => Some(ClassId::Hemangioma),
            ImageClass::Cyst => Some(ClassId::Cyst),
            ImageClass::Healthy => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ImageClass::Metastasis => "metastasis",
            ImageClass::Hemangioma => "hemangioma",
            ImageClass::Cyst => "cyst",
            ImageClass::Healthy => "healthy",
        }
    }
}

impl fmt::Display for ImageClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Physical voxel size in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelSpacing {
    pub sx: f64,
    pub sy: f64,
    pub slice_thickness: f64,
}

impl PixelSpacing {
    /// In-plane spacing range of the clinical scanners the phantom imitates.
    pub const IN_PLANE_RANGE: (f64, f64) = (0.71, 1.17);
    pub const THICKNESS_RANGE: (f64, f64) = (1.25, 5.0);

    pub fn new(sx: f64, sy: f64, slice_thickness: f64) -> Result<Self> {
        for (name, v) in [("sx", sx), ("sy", sy), ("slice_thickness", slice_thickness)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidValue(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(Self {
            sx,
            sy,
            slice_thickness,
        })
    }

    pub fn isotropic(mm: f64) -> Self {
        Self {
            sx: mm,
            sy: mm,
            slice_thickness: mm,
        }
    }

    pub fn pixel_area_mm2(&self) -> f64 {
        self.sx * self.sy
    }

    /// True when the spacing lies in the range the phantom generator emits.
    pub fn within_phantom_range(&self) -> bool {
        let (lo, hi) = Self::IN_PLANE_RANGE;
        let (tlo, thi) = Self::THICKNESS_RANGE;
        (lo..=hi).contains(&self.sx)
            && (lo..=hi).contains(&self.sy)
            && (tlo..=thi).contains(&self.slice_thickness)
    }
}

pub(crate) fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % DIM_MULTIPLE != 0 || width % DIM_MULTIPLE != 0 {
        return Err(Error::IndivisibleDims { height, width });
    }
    Ok(())
}

/// A single axial CT image in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct CtSlice {
    pixels: Array2<f32>,
    spacing: PixelSpacing,
    volume_id: String,
    z_index: usize,
}

impl CtSlice {
    pub fn new(
        pixels: Array2<f32>,
        spacing: PixelSpacing,
        volume_id: impl Into<String>,
        z_index: usize,
    ) -> Result<Self> {
        let (h, w) = pixels.dim();
        check_dims(h, w)?;
        if let Some(bad) = pixels.iter().find(|v| !(HU_MIN..=HU_MAX).contains(*v)) {
            return Err(Error::InvalidValue(format!(
                "HU value {bad} outside [{HU_MIN}, {HU_MAX}]"
            )));
        }
        Ok(Self {
            pixels,
            spacing,
            volume_id: volume_id.into(),
            z_index,
        })
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn spacing(&self) -> PixelSpacing {
        self.spacing
    }

    pub fn volume_id(&self) -> &str {
        &self.volume_id
    }

    pub fn z_index(&self) -> usize {
        self.z_index
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    /// Same provenance, different pixels. Used by augmentation.
    pub(crate) fn with_pixels(&self, pixels: Array2<f32>) -> Self {
        debug_assert_eq!(pixels.dim(), self.pixels.dim());
        Self {
            pixels,
            spacing: self.spacing,
            volume_id: self.volume_id.clone(),
            z_index: self.z_index,
        }
    }
}

/// Hard per-pixel class assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    labels: Array2<u8>,
}

impl LabelMap {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(Error::InvalidValue(format!("class code {bad} is not a valid class")));
        }
        Ok(Self { labels })
    }

    pub fn filled(dim: (usize, usize), class: ClassId) -> Self {
        Self {
            labels: Array2::from_elem(dim, class.code()),
        }
    }

    pub fn codes(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn into_codes(self) -> Array2<u8> {
        self.labels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn get(&self, row: usize, col: usize) -> ClassId {
        ClassId::from_code(self.labels[[row, col]]).expect("validated at construction")
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for &c in &self.labels {
            counts[c as usize] += 1;
        }
        counts
    }

    /// Binary mask of pixels whose class satisfies `pred`.
    pub fn mask_where(&self, pred: impl Fn(ClassId) -> bool) -> Array2<bool> {
        let table: [bool; NUM_CLASSES] = ClassId::ALL.map(&pred);
        self.labels.mapv(|c| table[c as usize])
    }
}

/// Where a soft target came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOrigin {
    GroundTruth,
    PseudoLabel,
}

/// How the probability mass `1 - gamma` is distributed over the other classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    /// Other classes get 0; the target vector sums to gamma.
    #[default]
    Zero,
    /// Other classes share `1 - gamma` equally; the vector sums to 1.
    Uniform,
}

/// Per-pixel target distribution, stored `H x W x 6`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMap {
    targets: Array3<f32>,
    origin: LabelOrigin,
    gamma: f64,
    fill: FillMode,
}

impl SoftLabelMap {
    /// Wraps raw targets. Entries must lie in `[0, 1]`.
    pub fn from_targets(
        targets: Array3<f32>,
        origin: LabelOrigin,
        gamma: f64,
        fill: FillMode,
    ) -> Result<Self> {
        if targets.dim().2 != NUM_CLASSES {
            return Err(Error::ShapeMismatch {
                expected: vec![targets.dim().0, targets.dim().1, NUM_CLASSES],
                actual: targets.shape().to_vec(),
            });
        }
        if targets.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue("soft targets must lie in [0, 1]".into()));
        }
        Ok(Self {
            targets,
            origin,
            gamma,
            fill,
        })
    }

    pub fn targets(&self) -> &Array3<f32> {
        &self.targets
    }

    pub fn origin(&self) -> LabelOrigin {
        self.origin
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn fill(&self) -> FillMode {
        self.fill
    }

    pub fn dim(&self) -> (usize, usize) {
        let (h, w, _) = self.targets.dim();
        (h, w)
    }

    /// Per-pixel argmax; ties go to the lowest class code.
    pub fn argmax(&self) -> LabelMap {
        let (h, w) = self.dim();
        let mut out = Array2::<u8>::zeros((h, w));
        Zip::from(&mut out)
            .and(self.targets.lanes(ndarray::Axis(2)))
            .for_each(|o, v| *o = argmax_lowest(v) as u8);
        LabelMap { labels: out }
    }

    pub(crate) fn with_targets(&self, targets: Array3<f32>) -> Self {
        Self {
            targets,
            origin: self.origin,
            gamma: self.gamma,
            fill: self.fill,
        }
    }
}

/// Index of the largest entry, first index on ties.
pub fn argmax_lowest<F: PartialOrd + Copy>(v: ArrayView1<'_, F>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Encodes a hard label map as soft targets whose hot entry is `gamma`.
pub fn hard_to_soft(
    labels: &LabelMap,
    gamma: f64,
    fill: FillMode,
    origin: LabelOrigin,
) -> Result<SoftLabelMap> {
    if !(gamma > 0.5 && gamma <= 1.0) {
        return Err(Error::GammaOutOfRange(gamma));
    }
    let (h, w) = labels.dim();
    let rest = match fill {
        FillMode::Zero => 0.0,
        FillMode::Uniform => ((1.0 - gamma) / (NUM_CLASSES - 1) as f64) as f32,
    };
    let hot = gamma as f32;
    let mut targets = Array3::<f32>::from_elem((h, w, NUM_CLASSES), rest);
    Zip::from(targets.lanes_mut(ndarray::Axis(2)))
        .and(&labels.labels)
        .for_each(|mut v, &c| v[c as usize] = hot);
    Ok(SoftLabelMap {
        targets,
        origin,
        gamma,
        fill,
    })
}

/// Majority lesion class, or healthy when the map has no lesion pixels.
pub fn image_level_class(labels: &LabelMap) -> ImageClass {
    let counts = labels.class_counts();
    let mut best: Option<ClassId> = None;
    for class in ClassId::LESIONS {
        let n = counts[class as usize];
        if n > 0 && best.is_none_or(|b| n > counts[b as usize]) {
            best = Some(class);
        }
    }
    best.and_then(ImageClass::from_lesion)
        .unwrap_or(ImageClass::Healthy)
}

/// Erodes `mask` by a `(2r+1)^2` square; pixels outside the frame count as unset.
pub fn erode_square(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut rows = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            rows[[y, x]] = x >= radius
                && x + radius < w
                && (x - radius..=x + radius).all(|xx| mask[[y, xx]]);
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = y >= radius
                && y + radius < h
                && (y - radius..=y + radius).all(|yy| rows[[yy, x]]);
        }
    }
    out
}

/// Pixels of `liver` within `width` pixels (chessboard distance) of a non-liver pixel.
pub fn boundary_band(liver: &Array2<bool>, width: usize) -> Result<Array2<bool>> {
    if width == 0 {
        return Err(Error::InvalidValue("boundary width must be at least 1".into()));
    }
    let eroded = erode_square(liver, width);
    Ok(Zip::from(liver)
        .and(&eroded)
        .map_collect(|&m, &e| m && !e))
}

/// Labeled slice with its whole-image class.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSlice {
    pub slice: CtSlice,
    pub labels: LabelMap,
    pub image_class: ImageClass,
}

impl AnnotatedSlice {
    pub fn new(slice: CtSlice, labels: LabelMap) -> Result<Self> {
        if slice.dim() != labels.dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![slice.dim().0, slice.dim().1],
                actual: vec![labels.dim().0, labels.dim().1],
            });
        }
        let image_class = image_level_class(&labels);
        Ok(Self {
            slice,
            labels,
            image_class,
        })
    }
}

/// A labeled center slice and its unlabeled neighbours along z.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePack {
    pub labeled: AnnotatedSlice,
    pub adjacent: Vec<CtSlice>,
}

/// Train packs and held-out test slices from disjoint volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SlicePack>,
    pub test: Vec<AnnotatedSlice>,
}

impl DatasetSplit {
    pub fn new(train: Vec<SlicePack>, test: Vec<AnnotatedSlice>) -> Result<Self> {
        let train_ids: std::collections::BTreeSet<&str> =
            train.iter().map(|p| p.labeled.slice.volume_id()).collect();
        if let Some(shared) = test
            .iter()
            .map(|a| a.slice.volume_id())
            .find(|id| train_ids.contains(id))
        {
            return Err(Error::InvalidValue(format!(
                "volume {shared} appears in both train and test"
            )));
        }
        Ok(Self { train, test })
    }

    pub fn labeled(&self) -> impl Iterator<Item = &AnnotatedSlice> {
        self.train.iter().map(|p| &p.labeled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn single(class: ClassId) -> LabelMap {
        LabelMap::filled((1, 1), class)
    }

    fn vector(map: &SoftLabelMap) -> Vec<f32> {
        map.targets().iter().copied().collect()
    }

    #[test]
    fn one_hot_at_gamma_one() {
        let m = hard_to_soft(&single(ClassId::Metastasis), 1.0, FillMode::Zero, LabelOrigin::GroundTruth)
            .unwrap();
        assert_eq!(vector(&m), vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let u = hard_to_soft(&single(ClassId::Metastasis), 1.0, FillMode::Uniform, LabelOrigin::GroundTruth)
            .unwrap();
        assert_eq!(vector(&u), vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_fill_gamma() {
        let m = hard_to_soft(&single(ClassId::Metastasis), 0.7, FillMode::Zero, LabelOrigin::PseudoLabel)
            .unwrap();
        assert_eq!(vector(&m), vec![0.0, 0.0, 0.0, 0.7, 0.0, 0.0]);
    }

    #[test]
    fn uniform_fill_gamma() {
        let m = hard_to_soft(&single(ClassId::Metastasis), 0.7, FillMode::Uniform, LabelOrigin::PseudoLabel)
            .unwrap();
        let v = vector(&m);
        for (i, x) in v.iter().enumerate() {
            let want = if i == 3 { 0.7 } else { 0.06 };
            assert!((x - want).abs() < 1e-6, "{i}: {x}");
        }
        assert!((v.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gamma_range_rejected() {
        for g in [0.5, 0.2, 1.01, f64::NAN] {
            assert!(matches!(
                hard_to_soft(&single(ClassId::Liver), g, FillMode::Zero, LabelOrigin::PseudoLabel),
                Err(Error::GammaOutOfRange(_))
            ));
        }
    }

    fn map_with(counts: &[(ClassId, usize)]) -> LabelMap {
        let mut codes = Vec::new();
        for &(c, n) in counts {
            codes.extend(std::iter::repeat_n(c.code(), n));
        }
        let len = codes.len();
        LabelMap::new(Array2::from_shape_vec((1, len), codes).unwrap()).unwrap()
    }

    #[test]
    fn majority_class() {
        let m = map_with(&[(ClassId::Metastasis, 10), (ClassId::Cyst, 5), (ClassId::Liver, 50)]);
        assert_eq!(image_level_class(&m), ImageClass::Metastasis);
        let h = map_with(&[(ClassId::Liver, 5), (ClassId::LiverBoundary, 3)]);
        assert_eq!(image_level_class(&h), ImageClass::Healthy);
    }

    #[test]
    fn majority_tie_goes_to_lowest_code_in_either_order() {
        let a = map_with(&[(ClassId::Hemangioma, 7), (ClassId::Cyst, 7)]);
        let b = map_with(&[(ClassId::Cyst, 7), (ClassId::Hemangioma, 7)]);
        assert_eq!(image_level_class(&a), ImageClass::Hemangioma);
        assert_eq!(image_level_class(&b), ImageClass::Hemangioma);
    }

    fn disc(n: usize, cy: f64, cx: f64, r: f64) -> Array2<bool> {
        Array2::from_shape_fn((n, n), |(y, x)| {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            dy * dy + dx * dx <= r * r
        })
    }

    /// Chessboard distance from (y, x) to the nearest unset pixel, frame exterior counted as unset.
    fn brute_band(mask: &Array2<bool>, width: usize) -> Array2<bool> {
        let (h, w) = mask.dim();
        let w_i = width as isize;
        Array2::from_shape_fn((h, w), |(y, x)| {
            if !mask[[y, x]] {
                return false;
            }
            for dy in -w_i..=w_i {
                for dx in -w_i..=w_i {
                    let yy = y as isize + dy;
                    let xx = x as isize + dx;
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        return true;
                    }
                    if !mask[[yy as usize, xx as usize]] {
                        return true;
                    }
                }
            }
            false
        })
    }

    #[test]
    fn band_of_disc_matches_brute_force() {
        let m = disc(32, 15.5, 15.5, 10.0);
        let band = boundary_band(&m, 2).unwrap();
        assert_eq!(band, brute_band(&m, 2));
        // the shell is a ring: the centre survives
        assert!(!band[[15, 15]]);
        assert!(band.iter().filter(|&&b| b).count() > 0);
    }

    #[test]
    fn band_edge_cases() {
        let empty = Array2::from_elem((8, 8), false);
        assert_eq!(boundary_band(&empty, 2).unwrap(), empty);

        let mut one = Array2::from_elem((8, 8), false);
        one[[4, 4]] = true;
        assert_eq!(boundary_band(&one, 1).unwrap(), one);

        assert!(boundary_band(&one, 0).is_err());
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax_lowest(arr1(&[0.2f32, 0.4, 0.4]).view()), 1);
        assert_eq!(argmax_lowest(arr1(&[0.5f32, 0.5]).view()), 0);
    }

    #[test]
    fn slice_rejects_bad_dims_and_hu() {
        let sp = PixelSpacing::isotropic(1.0);
        assert!(matches!(
            CtSlice::new(Array2::zeros((50, 50)), sp, "v", 0),
            Err(Error::IndivisibleDims { .. })
        ));
        assert!(CtSlice::new(Array2::from_elem((16, 16), -2000.0), sp, "v", 0).is_err());
        assert!(CtSlice::new(Array2::zeros((16, 32)), sp, "v", 0).is_ok());
    }

    #[test]
    fn label_codes_validated() {
        assert!(LabelMap::new(Array2::from_elem((2, 2), 6u8)).is_err());
    }

    #[test]
    fn spacing_validation() {
        assert!(PixelSpacing::new(0.0, 1.0, 1.0).is_err());
        let s = PixelSpacing::new(0.71, 1.17, 2.5).unwrap();
        assert!(s.within_phantom_range());
        assert!(!PixelSpacing::isotropic(1.0).within_phantom_range());
    }
}
