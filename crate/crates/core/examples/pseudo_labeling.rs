//! Trains the shared lesion and liver networks, pseudo-labels the adjacent
//! slices of every labeled centre and compares them with the hidden truth.

use anatomical_aug::augment::AugmentPolicy;
use anatomical_aug::domain::{image_level_class, ImageClass};
use anatomical_aug::metrics::{binary_lesion_mask, dice};
use anatomical_aug::net::NetworkConfig;
use anatomical_aug::phantom::{build_volumes, dataset_from_volumes, PhantomSpec};
use anatomical_aug::ssl::{neighbor_pool, OptimConfig, SharedNets, SslConfig, TrainingMode};

fn main() -> anatomical_aug::error::Result<()> {
    let spec = PhantomSpec {
        volume_dims: (64, 64, 12),
        ..PhantomSpec::default()
    };
    let (train, test) = build_volumes(&spec, 8, 2, 8)?;
    let data = dataset_from_volumes(&spec, &train, &test)?;
    let config = SslConfig {
        network: NetworkConfig {
            width_factor: 16,
            dropout_rate: 0.1,
            input_dims: (64, 64),
            ..NetworkConfig::default()
        },
        optim: OptimConfig {
            learning_rate: 0.1,
            batch_size: 4,
            epochs: 60,
            ..OptimConfig::default()
        },
        policy: AugmentPolicy {
            translation_range_px: (-3.0, 3.0),
            ..AugmentPolicy::default()
        },
        ..SslConfig::default()
    };
    let shared = SharedNets::train(&data, &config)?;
    let (pool, passes) = neighbor_pool(TrainingMode::Anatomical, &data, &config, Some(&shared))?;
    println!("{} adjacent slices labeled with {passes} forward passes", pool.len());

    let mut lesion_dice = Vec::new();
    for (slice, targets) in &pool {
        let vol = train.iter().find(|v| v.volume_id == slice.volume_id()).expect("source volume");
        let truth = vol.label_map(slice.z_index());
        let (pred, gt) = (targets.argmax(), truth);
        let d = dice(&binary_lesion_mask(&pred), &binary_lesion_mask(&gt))?;
        let max = targets.targets().iter().cloned().fold(0.0f32, f32::max);
        println!(
            "{} z={:>2}: truth {:<10} pseudo {:<10} lesion dice {d:.3}, max target {max:.2}",
            slice.volume_id(),
            slice.z_index(),
            image_level_class(&gt).name(),
            image_level_class(&pred).name()
        );
        if image_level_class(&gt) != ImageClass::Healthy {
            lesion_dice.push(d);
        }
    }
    let mean = lesion_dice.iter().sum::<f64>() / lesion_dice.len().max(1) as f64;
    println!("mean lesion dice over {} lesion slices: {mean:.3}", lesion_dice.len());
    Ok(())
}
