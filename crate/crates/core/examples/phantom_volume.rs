//! Generates one phantom volume, prints per-slice contents and writes an
//! overlay of its first labeled centre slice.

use anatomical_aug::domain::{image_level_class, ClassId};
use anatomical_aug::harness::plot::{overlay, save_png};
use anatomical_aug::phantom::{generate_volume, select_centers, PhantomSpec};

fn main() -> anatomical_aug::error::Result<()> {
    let spec = PhantomSpec::default();
    let vol = generate_volume(&spec, 7)?;
    println!(
        "{}: kind {}, spacing {:.2} x {:.2} mm, thickness {:.2} mm",
        vol.volume_id,
        vol.kind.name(),
        vol.spacing.sx,
        vol.spacing.sy,
        vol.spacing.slice_thickness
    );
    for z in 0..vol.depth() {
        let labels = vol.label_map(z);
        let counts = labels.class_counts();
        let lesion: usize = counts[ClassId::Metastasis as usize..].iter().sum();
        println!(
            "z={z:2}  liver {:4} px  boundary {:3} px  lesion {:3} px  image class {}",
            counts[ClassId::Liver as usize],
            counts[ClassId::LiverBoundary as usize],
            lesion,
            image_level_class(&labels).name()
        );
    }
    let centers = select_centers(&vol, spec.centers_per_volume, spec.neighbors_per_side);
    println!("labeled centre slices: {centers:?}");

    let z = centers[0];
    let img = overlay(&vol.slice(z), Some(&vol.label_map(z)), 4)?;
    let path = std::env::temp_dir().join("phantom_overlay.png");
    save_png(&img, &path)?;
    println!("overlay written to {}", path.display());
    Ok(())
}
