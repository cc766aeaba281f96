//! Removes lesion components below 1 cm² and clears predictions outside
//! the liver mask.

use anatomical_aug::domain::{ClassId, LabelMap, PixelSpacing};
use anatomical_aug::postproc::{area_filter, lesion_components, liver_refine};
use ndarray::{s, Array2};

fn main() -> anatomical_aug::error::Result<()> {
    let mut codes = Array2::<u8>::from_elem((32, 32), ClassId::Liver.code());
    codes.slice_mut(s![..2, ..]).fill(0);
    codes.slice_mut(s![2..12, 2..12]).fill(ClassId::Metastasis.code());
    codes.slice_mut(s![20..26, 20..26]).fill(ClassId::Cyst.code());
    codes.slice_mut(s![0..2, 28..32]).fill(ClassId::Hemangioma.code());
    let labels = LabelMap::new(codes)?;

    for mm in [0.71, 1.0, 1.17] {
        let spacing = PixelSpacing::isotropic(mm);
        println!("spacing {mm} mm:");
        for c in lesion_components(&labels, spacing) {
            println!("  {} component: {} px = {:.1} mm²", c.class.name(), c.area_px, c.area_mm2);
        }
        let kept = lesion_components(&area_filter(&labels, spacing), spacing).len();
        println!("  {kept} component(s) survive the area filter");
    }

    let mut liver = Array2::from_elem((32, 32), true);
    liver.slice_mut(s![..2, ..]).fill(false);
    let refined = liver_refine(&labels, &liver)?;
    println!(
        "hemangioma pixels outside the liver: {} before, {} after refinement",
        labels.class_counts()[ClassId::Hemangioma as usize],
        refined.class_counts()[ClassId::Hemangioma as usize]
    );
    Ok(())
}
