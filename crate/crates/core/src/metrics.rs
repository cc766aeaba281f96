//! Image-level segmentation and classification scores.
//!
//! * **success** - fraction of lesion images whose predicted lesion mask
//!   overlaps the ground-truth lesion mask at all.
//! * **dice1** - mean lesion Dice over the overlapping images only.
//! * **dice2** - mean lesion Dice over all lesion images, 0 for misses.
//! * **acc** - fraction of images whose majority lesion class (or healthy)
//!   matches the ground truth.
//!
//! By construction `dice2 == dice1 * success`.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::domain::{image_level_class, AnnotatedSlice, ClassId, ImageClass, LabelMap};
use crate::error::{Error, Result};

pub fn binary_lesion_mask(labels: &LabelMap) -> Array2<bool> {
    labels.codes().mapv(ClassId::is_lesion_code)
}

/// `2|a & b| / (|a| + |b|)`, and 1.0 when both masks are empty.
pub fn dice(a: &Array2<bool>, b: &Array2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    Zip::from(a).and(b).for_each(|&x, &y| {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    });
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Which images form the denominator of success / dice2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessDenominator {
    /// Only images whose ground truth contains lesion pixels.
    #[default]
    LesionImages,
    /// Every image; a healthy image succeeds when the prediction is lesion-free.
    AllImages,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub denominator: SuccessDenominator,
    pub acc_includes_healthy: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            denominator: SuccessDenominator::LesionImages,
            acc_includes_healthy: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub volume_id: String,
    pub z_index: usize,
    pub gt_class: ImageClass,
    pub pred_class: ImageClass,
    /// Lesion Dice; `None` for images outside the success denominator.
    pub dice: Option<f64>,
    pub overlap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Absent when no image overlaps.
    pub dice1: Option<f64>,
    pub dice2: f64,
    pub success: f64,
    pub acc: f64,
    pub n_images: usize,
    pub n_lesion_images: usize,
    pub per_image: Vec<ImageRecord>,
}

pub fn evaluate(preds: &[LabelMap], gts: &[AnnotatedSlice]) -> Result<EvaluationReport> {
    evaluate_with(preds, gts, EvalOptions::default())
}

pub fn evaluate_with(
    preds: &[LabelMap],
    gts: &[AnnotatedSlice],
    options: EvalOptions,
) -> Result<EvaluationReport> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidValue(format!(
            "{} predictions for {} ground-truth images",
            preds.len(),
            gts.len()
        )));
    }
    let mut per_image = Vec::with_capacity(gts.len());
    let (mut scored, mut overlapping, mut dice_sum) = (0usize, 0usize, 0.0f64);
    let (mut acc_total, mut acc_hits) = (0usize, 0usize);
    let mut n_lesion_images = 0;
    for (pred, gt) in preds.iter().zip(gts) {
        let gt_mask = binary_lesion_mask(&gt.labels);
        let pred_mask = binary_lesion_mask(pred);
        let gt_has = gt_mask.iter().any(|&v| v);
        let pred_has = pred_mask.iter().any(|&v| v);
        n_lesion_images += gt_has as usize;
        let counted = gt_has || options.denominator == SuccessDenominator::AllImages;
        let (overlap, d) = if !counted {
            (false, None)
        } else if gt_has {
            let hit = Zip::from(&gt_mask).and(&pred_mask).any(|&a, &b| a && b);
            (hit, Some(if hit { dice(&gt_mask, &pred_mask)? } else { 0.0 }))
        } else {
            // healthy ground truth, all-images mode: agreement on absence
            (!pred_has, Some(if pred_has { 0.0 } else { 1.0 }))
        };
        if counted {
            scored += 1;
            if overlap {
                overlapping += 1;
                dice_sum += d.unwrap_or(0.0);
            }
        }
        let pred_class = image_level_class(pred);
        if gt_has || options.acc_includes_healthy {
            acc_total += 1;
            acc_hits += (pred_class == gt.image_class) as usize;
        }
        per_image.push(ImageRecord {
            volume_id: gt.slice.volume_id().to_string(),
            z_index: gt.slice.z_index(),
            gt_class: gt.image_class,
            pred_class,
            dice: d,
            overlap,
        });
    }
    let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
    Ok(EvaluationReport {
        dice1: (overlapping > 0).then(|| dice_sum / overlapping as f64),
        dice2: ratio(dice_sum, scored),
        success: ratio(overlapping as f64, scored),
        acc: ratio(acc_hits as f64, acc_total),
        n_images: gts.len(),
        n_lesion_images,
        per_image,
    })
}
