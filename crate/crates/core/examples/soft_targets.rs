//! Turns a hard label map into soft targets and shows the boundary band.

use anatomical_aug::domain::{boundary_band, hard_to_soft, image_level_class, ClassId, FillMode, LabelMap, LabelOrigin};
use ndarray::Array2;

fn main() -> anatomical_aug::error::Result<()> {
    let mut liver = Array2::from_elem((16, 16), false);
    liver.slice_mut(ndarray::s![3..13, 2..14]).fill(true);
    let band = boundary_band(&liver, 2)?;

    let mut codes = Array2::<u8>::zeros((16, 16));
    for ((r, c), &inside) in liver.indexed_iter() {
        if inside {
            codes[[r, c]] = if band[[r, c]] { ClassId::LiverBoundary.code() } else { ClassId::Liver.code() };
        }
    }
    codes.slice_mut(ndarray::s![6..9, 6..9]).fill(ClassId::Cyst.code());
    codes[[7, 10]] = ClassId::Metastasis.code();
    let labels = LabelMap::new(codes)?;

    println!("label map:");
    for row in labels.codes().rows() {
        println!("  {}", row.iter().map(|c| c.to_string()).collect::<String>());
    }
    println!("image class: {}", image_level_class(&labels).name());

    for fill in [FillMode::Zero, FillMode::Uniform] {
        let soft = hard_to_soft(&labels, 0.7, fill, LabelOrigin::PseudoLabel)?;
        let v = soft.targets().slice(ndarray::s![7, 7, ..]).to_vec();
        let sum: f32 = v.iter().sum();
        println!("{fill:?} fill, cyst pixel: {v:?} (sum {sum:.2})");
        assert_eq!(soft.argmax(), labels);
    }
    Ok(())
}
