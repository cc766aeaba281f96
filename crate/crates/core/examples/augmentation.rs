//! Samples random scale/translation transforms and applies them to a
//! labeled phantom slice, keeping image and targets aligned.

use anatomical_aug::augment::{apply, sample_transform, AugmentPolicy};
use anatomical_aug::domain::{hard_to_soft, FillMode, LabelOrigin};
use anatomical_aug::harness::plot::save_png;
use anatomical_aug::harness::plot::overlay;
use anatomical_aug::phantom::{generate_volume, PhantomSpec};

fn main() -> anatomical_aug::error::Result<()> {
    let vol = generate_volume(&PhantomSpec::default(), 3)?;
    let z = vol.planned_centers.first().copied().unwrap_or(vol.depth() / 2);
    let slice = vol.slice(z);
    let targets = hard_to_soft(&vol.label_map(z), 1.0, FillMode::Zero, LabelOrigin::GroundTruth)?;

    let policy = AugmentPolicy {
        translation_range_px: (-6.0, 6.0),
        seed: 11,
        ..AugmentPolicy::default()
    };
    for k in 0..4 {
        let mut rng = policy.rng_for(0, 0, k);
        let t = sample_transform(&policy, &mut rng);
        let (img, tgt) = apply(&t, &slice, &targets)?;
        let labels = tgt.argmax();
        let liver = labels.class_counts()[1..].iter().sum::<usize>();
        println!(
            "k={k}: scale {:.3}, shift ({:+.2}, {:+.2}) px, foreground {} px",
            t.scale, t.tx, t.ty, liver
        );
        let path = std::env::temp_dir().join(format!("augmented_{k}.png"));
        save_png(&overlay(&img, Some(&labels), 4)?, &path)?;
    }
    println!("overlays written to {}", std::env::temp_dir().display());
    Ok(())
}
