//! Inverse-frequency class weights and the weighted soft cross-entropy.

use anatomical_aug::domain::{hard_to_soft, FillMode, LabelOrigin};
use anatomical_aug::loss::{class_weights, soft_ce};
use anatomical_aug::net::{ForwardMode, NetworkConfig, SegmentationNet};
use anatomical_aug::phantom::{build_dataset, PhantomSpec};
use ndarray::Axis;

fn main() -> anatomical_aug::error::Result<()> {
    let spec = PhantomSpec {
        volume_dims: (32, 32, 8),
        ..PhantomSpec::default()
    };
    let data = build_dataset(&spec, 4, 1, 2)?;
    let w = class_weights(&data)?;
    println!("class weights (mean 1): {:?}", w.as_slice());

    let net = SegmentationNet::<f64>::init(&NetworkConfig {
        width_factor: 16,
        input_dims: (32, 32),
        ..NetworkConfig::default()
    })?;
    let a = data.labeled().next().expect("one labeled slice");
    let batch = SegmentationNet::<f64>::prepare_batch(&[&a.slice])?;
    let probs = net.forward_probs(batch.view(), ForwardMode::Eval)?;
    let (k, _, h, wd) = probs.dim();
    let p = probs.index_axis(Axis(1), 0).into_shape_with_order((k, h * wd)).unwrap().to_owned();

    for gamma in [1.0, 0.7] {
        let soft = hard_to_soft(&a.labels, gamma, FillMode::Zero, LabelOrigin::GroundTruth)?;
        let t = soft.targets().mapv(f64::from);
        let t = t.view().into_shape_with_order((h * wd, k)).unwrap().reversed_axes().to_owned();
        let weighted = soft_ce(p.view(), t.view(), w.as_slice())?;
        let plain = soft_ce(p.view(), t.view(), &[1.0; 6])?;
        println!("gamma {gamma}: untrained loss {weighted:.4} weighted, {plain:.4} unweighted");
    }
    Ok(())
}
