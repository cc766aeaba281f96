//! Trains a small lesion network on ground-truth slices, saves a checkpoint,
//! reloads it and checks the predictions are unchanged.

use anatomical_aug::domain::{hard_to_soft, CtSlice, FillMode, LabelOrigin};
use anatomical_aug::augment::AugmentPolicy;
use anatomical_aug::harness::runner::checkpoint_of;
use anatomical_aug::loss::class_weights;
use anatomical_aug::net::{load_checkpoint, save_checkpoint, Checkpoint, NetworkConfig};
use anatomical_aug::phantom::{build_dataset, PhantomSpec};
use anatomical_aug::ssl::{predict_labels, train_supervised, OptimConfig, TargetKind, TrainSpec};

fn main() -> anatomical_aug::error::Result<()> {
    let spec = PhantomSpec {
        volume_dims: (32, 32, 8),
        ..PhantomSpec::default()
    };
    let data = build_dataset(&spec, 6, 2, 1)?;
    let items: Vec<_> = data
        .labeled()
        .map(|a| Ok((a.slice.clone(), hard_to_soft(&a.labels, 1.0, FillMode::Zero, LabelOrigin::GroundTruth)?)))
        .collect::<anatomical_aug::error::Result<_>>()?;
    let weights = class_weights(&data)?;

    let train_spec = TrainSpec {
        network: NetworkConfig {
            width_factor: 16,
            dropout_rate: 0.1,
            input_dims: (32, 32),
            ..NetworkConfig::default()
        },
        optim: OptimConfig {
            learning_rate: 0.02,
            batch_size: 4,
            epochs: 15,
            ..OptimConfig::default()
        },
        policy: AugmentPolicy {
            translation_range_px: (-2.0, 2.0),
            ..AugmentPolicy::default()
        },
        target: TargetKind::Lesion,
        seed: 4,
        loss_log: None,
    };
    let out = train_supervised(&items, &weights, &train_spec, None)?;
    println!(
        "{} samples/epoch, {} steps, loss {:.3} -> {:.3}",
        out.samples_per_epoch,
        out.steps,
        out.epoch_losses[0],
        out.epoch_losses.last().unwrap()
    );

    let path = std::env::temp_dir().join("lesion_net.ckpt");
    save_checkpoint(&path, &checkpoint_of(&out.net, 15, weights.as_slice(), None, &out.lineage, ""))?;
    let back: Checkpoint = load_checkpoint(&path)?;
    let slices: Vec<&CtSlice> = data.test.iter().map(|a| &a.slice).collect();
    let same = predict_labels(&out.net, &slices)? == predict_labels(&back.net, &slices)?;
    println!("checkpoint {} ({} parameters), reload identical: {same}", path.display(), back.net.count_parameters());
    Ok(())
}
