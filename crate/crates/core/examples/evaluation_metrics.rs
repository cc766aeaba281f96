//! Scores predictions with Dice1, Dice2, Success and ACC.

use anatomical_aug::domain::{AnnotatedSlice, ClassId, CtSlice, LabelMap, PixelSpacing};
use anatomical_aug::metrics::{evaluate_with, EvalOptions, SuccessDenominator};
use ndarray::{s, Array2};

fn map(lesion: Option<(ClassId, usize, usize)>) -> LabelMap {
    let mut codes = Array2::<u8>::from_elem((16, 16), ClassId::Liver.code());
    if let Some((class, at, size)) = lesion {
        codes.slice_mut(s![at..at + size, at..at + size]).fill(class.code());
    }
    LabelMap::new(codes).unwrap()
}

fn main() -> anatomical_aug::error::Result<()> {
    let cases = [
        (Some((ClassId::Cyst, 2, 6)), Some((ClassId::Cyst, 3, 6))),
        (Some((ClassId::Metastasis, 4, 5)), Some((ClassId::Hemangioma, 4, 5))),
        (Some((ClassId::Hemangioma, 2, 4)), Some((ClassId::Hemangioma, 9, 4))),
        (None, None),
        (None, Some((ClassId::Cyst, 5, 3))),
    ];
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for (i, (gt, pred)) in cases.iter().enumerate() {
        let slice = CtSlice::new(Array2::zeros((16, 16)), PixelSpacing::isotropic(1.0), "demo", i)?;
        gts.push(AnnotatedSlice::new(slice, map(*gt))?);
        preds.push(map(*pred));
    }
    for denominator in [SuccessDenominator::LesionImages, SuccessDenominator::AllImages] {
        let options = EvalOptions {
            denominator,
            ..EvalOptions::default()
        };
        let r = evaluate_with(&preds, &gts, options)?;
        println!(
            "{denominator:?}: Dice1 {:.3}  Dice2 {:.3}  Success {:.3}  ACC {:.3}",
            r.dice1.unwrap_or(f64::NAN),
            r.dice2,
            r.success,
            r.acc
        );
        for rec in &r.per_image {
            println!("   z={} {} -> {} dice {:?}", rec.z_index, rec.gt_class.name(), rec.pred_class.name(), rec.dice);
        }
    }
    Ok(())
}
