//! Online scale/translation augmentation applied jointly to a slice and its targets.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ClassId, CtSlice, SoftLabelMap, HU_MIN};
use crate::error::{Error, Result};
use crate::seed::substream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Inclusive bounds of the isotropic scale factor.
    pub scale_range: (f64, f64),
    /// Inclusive bounds of each of the x and y shifts, in pixels.
    pub translation_range_px: (f64, f64),
    pub augmentations_per_item: usize,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            scale_range: (0.9, 1.1),
            translation_range_px: (-25.0, 25.0),
            augmentations_per_item: 2,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// Identity transforms only.
    pub fn none(augmentations_per_item: usize) -> Self {
        Self {
            scale_range: (1.0, 1.0),
            translation_range_px: (0.0, 0.0),
            augmentations_per_item,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("bad scale range {:?}", self.scale_range)));
        }
        let (tlo, thi) = self.translation_range_px;
        if !(tlo <= thi && tlo.is_finite() && thi.is_finite()) {
            return Err(Error::Config(format!(
                "bad translation range {:?}",
                self.translation_range_px
            )));
        }
        Ok(())
    }

    /// Deterministic stream for augmentation `k` of `item` in `epoch`.
    pub fn rng_for(&self, item: u64, epoch: u64, k: u64) -> ChaCha8Rng {
        substream(self.seed, &[item, epoch, k])
    }
}

/// Scale about the image centre, then shift by `(tx, ty)` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeomTransform {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl GeomTransform {
    pub const IDENTITY: GeomTransform = GeomTransform {
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// Source coordinate sampled by output pixel `(y, x)`.
    fn source(&self, y: f64, x: f64, cy: f64, cx: f64) -> (f64, f64) {
        (
            cy + (y - self.ty - cy) / self.scale,
            cx + (x - self.tx - cx) / self.scale,
        )
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn sample_transform<R: Rng + ?Sized>(policy: &AugmentPolicy, rng: &mut R) -> GeomTransform {
    let scale = uniform(rng, policy.scale_range);
    let tx = uniform(rng, policy.translation_range_px);
    let ty = uniform(rng, policy.translation_range_px);
    GeomTransform { scale, tx, ty }
}

/// Bilinear resampling; samples outside the frame read `fill`.
pub fn warp_bilinear(img: &Array2<f32>, t: &GeomTransform, fill: f32) -> Array2<f32> {
    let (h, w) = img.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = t.source(y as f64, x as f64, cy, cx);
        if !(0.0..=(h - 1) as f64).contains(&sy) || !(0.0..=(w - 1) as f64).contains(&sx) {
            return fill;
        }
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let fy = (sy - y0 as f64) as f32;
        let fx = (sx - x0 as f64) as f32;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let top = if fx == 0.0 {
            img[[y0, x0]]
        } else {
            img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx
        };
        if fy == 0.0 {
            return top;
        }
        let bottom = if fx == 0.0 {
            img[[y1, x0]]
        } else {
            img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx
        };
        top * (1.0 - fy) + bottom * fy
    })
}

/// Nearest-neighbour resampling of `H x W x K` targets; out-of-frame pixels
/// become a one-hot background target.
pub fn warp_nearest_targets(targets: &Array3<f32>, t: &GeomTransform) -> Array3<f32> {
    let (h, w, k) = targets.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Array3::<f32>::zeros((h, w, k));
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = t.source(y as f64, x as f64, cy, cx);
            let (ry, rx) = (sy.round(), sx.round());
            let mut lane = out.index_axis_mut(Axis(0), y);
            let mut lane = lane.index_axis_mut(Axis(0), x);
            if ry < 0.0 || rx < 0.0 || ry > (h - 1) as f64 || rx > (w - 1) as f64 {
                lane[ClassId::Background as usize] = 1.0;
            } else {
                lane.assign(&targets.slice(ndarray::s![ry as usize, rx as usize, ..]));
            }
        }
    }
    out
}

/// Applies `t` to an image and its targets; output dims equal input dims.
pub fn apply(t: &GeomTransform, slice: &CtSlice, targets: &SoftLabelMap) -> Result<(CtSlice, SoftLabelMap)> {
    if slice.dim() != targets.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![slice.dim().0, slice.dim().1],
            actual: vec![targets.dim().0, targets.dim().1],
        });
    }
    let pixels = warp_bilinear(slice.pixels(), t, HU_MIN);
    let warped = warp_nearest_targets(targets.targets(), t);
    Ok((slice.with_pixels(pixels), targets.with_targets(warped)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{hard_to_soft, FillMode, LabelMap, LabelOrigin, PixelSpacing};
    use rand::SeedableRng;

    fn slice_of(px: Array2<f32>) -> CtSlice {
        CtSlice::new(px, PixelSpacing::isotropic(1.0), "v", 3).unwrap()
    }

    fn soft(codes: Array2<u8>) -> SoftLabelMap {
        hard_to_soft(&LabelMap::new(codes).unwrap(), 0.7, FillMode::Uniform, LabelOrigin::PseudoLabel).unwrap()
    }

    #[test]
    fn identity_is_exact() {
        let px = Array2::from_shape_fn((16, 16), |(y, x)| (y * 16 + x) as f32 - 100.0);
        let codes = Array2::from_shape_fn((16, 16), |(y, x)| ((y + x) % 6) as u8);
        let (s, t) = apply(&GeomTransform::IDENTITY, &slice_of(px.clone()), &soft(codes.clone())).unwrap();
        assert_eq!(s.pixels(), &px);
        assert_eq!(t, soft(codes));
    }

    #[test]
    fn translation_moves_single_pixel() {
        let mut codes = Array2::zeros((16, 16));
        codes[[7, 4]] = 3;
        let t = GeomTransform { scale: 1.0, tx: 5.0, ty: 0.0 };
        let (_, out) = apply(&t, &slice_of(Array2::zeros((16, 16))), &soft(codes)).unwrap();
        let hard = out.argmax();
        let lesions: Vec<(usize, usize)> = hard
            .codes()
            .indexed_iter()
            .filter(|(_, &c)| c == 3)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(lesions, vec![(7, 9)]);
    }

    #[test]
    fn out_of_frame_is_background() {
        let codes = Array2::from_elem((16, 16), 1u8);
        let t = GeomTransform { scale: 1.0, tx: -8.0, ty: 0.0 };
        let (s, out) = apply(&t, &slice_of(Array2::zeros((16, 16))), &soft(codes)).unwrap();
        assert_eq!(s.pixels()[[0, 15]], HU_MIN);
        assert_eq!(out.targets()[[0, 15, 0]], 1.0);
        assert_eq!(out.argmax().codes()[[0, 15]], 0);
        assert_eq!(out.argmax().codes()[[0, 0]], 1);
    }

    #[test]
    fn degenerate_policy_gives_identity() {
        let p = AugmentPolicy::none(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(sample_transform(&p, &mut rng), GeomTransform::IDENTITY);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = AugmentPolicy::default();
        let a: Vec<_> = (0..5).map(|k| sample_transform(&p, &mut p.rng_for(3, 1, k))).collect();
        let b: Vec<_> = (0..5).map(|k| sample_transform(&p, &mut p.rng_for(3, 1, k))).collect();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }
}
