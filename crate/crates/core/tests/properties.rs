use anatomical_aug::augment::{apply, sample_transform, AugmentPolicy, GeomTransform};
use anatomical_aug::domain::{
    boundary_band, erode_square, hard_to_soft, image_level_class, AnnotatedSlice, ClassId, CtSlice, FillMode,
    LabelMap, LabelOrigin, PixelSpacing, NUM_CLASSES,
};
use anatomical_aug::harness::{summarize, CellResult};
use anatomical_aug::loss::soft_ce;
use anatomical_aug::metrics::{binary_lesion_mask, dice, evaluate, evaluate_with, EvalOptions, SuccessDenominator};
use anatomical_aug::net::{ForwardMode, NetworkConfig, SegmentationNet};
use anatomical_aug::postproc::{area_filter, liver_refine};
use anatomical_aug::ssl::TrainingMode;
use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Rect = (u8, usize, usize, usize, usize);

fn rects(max: usize) -> impl Strategy<Value = Vec<Rect>> {
    prop::collection::vec((0u8..6, 0usize..16, 0usize..16, 1usize..8, 1usize..8), 0..max)
}

fn paint(dim: usize, base: u8, rects: &[Rect]) -> LabelMap {
    let mut codes = Array2::from_elem((dim, dim), base);
    for &(c, r, col, h, w) in rects {
        let (r, col) = (r * dim / 16, col * dim / 16);
        codes
            .slice_mut(s![r..(r + h).min(dim), col..(col + w).min(dim)])
            .fill(c);
    }
    LabelMap::new(codes).unwrap()
}

fn annotated(labels: LabelMap, z: usize) -> AnnotatedSlice {
    let (h, w) = labels.dim();
    let slice = CtSlice::new(Array2::zeros((h, w)), PixelSpacing::isotropic(1.0), "p", z).unwrap();
    AnnotatedSlice::new(slice, labels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_targets_round_trip(r in rects(8), gamma in 0.501f64..=1.0, uniform in any::<bool>()) {
        let labels = paint(16, 0, &r);
        let fill = if uniform { FillMode::Uniform } else { FillMode::Zero };
        let soft = hard_to_soft(&labels, gamma, fill, LabelOrigin::PseudoLabel).unwrap();
        prop_assert_eq!(soft.argmax(), labels.clone());
        for v in soft.targets().lanes(ndarray::Axis(2)) {
            let max = v.iter().cloned().fold(f32::MIN, f32::max);
            prop_assert!((max - gamma as f32).abs() < 1e-6);
            prop_assert!(v.iter().all(|&t| (0.0..=1.0).contains(&t)));
            let sum: f32 = v.iter().sum();
            let want = if uniform { 1.0 } else { gamma as f32 };
            prop_assert!((sum - want).abs() < 1e-5);
        }
    }

    #[test]
    fn gamma_one_is_one_hot(r in rects(8)) {
        let labels = paint(16, 1, &r);
        let soft = hard_to_soft(&labels, 1.0, FillMode::Zero, LabelOrigin::GroundTruth).unwrap();
        for ((y, x, c), &t) in soft.targets().indexed_iter() {
            prop_assert_eq!(t, if labels.codes()[[y, x]] as usize == c { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn image_class_ignores_pixel_order(r in rects(8), seed in any::<u64>()) {
        let labels = paint(16, 1, &r);
        let mut flat: Vec<u8> = labels.codes().iter().copied().collect();
        flat.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = LabelMap::new(Array2::from_shape_vec((16, 16), flat).unwrap()).unwrap();
        prop_assert_eq!(image_level_class(&labels), image_level_class(&shuffled));
    }

    #[test]
    fn band_is_inside_liver_and_outside_erosion(r in rects(6), width in 1usize..4) {
        let liver = paint(32, 0, &r).mask_where(|c| c != ClassId::Background);
        let band = boundary_band(&liver, width).unwrap();
        let eroded = erode_square(&liver, width);
        for ((b, l), e) in band.iter().zip(&liver).zip(&eroded) {
            prop_assert!(!b || *l);
            prop_assert!(!(*b && *e));
            prop_assert_eq!(*l, *b || *e);
        }
    }

    #[test]
    fn augmentation_keeps_shape_and_valid_targets(
        r in rects(8), seed in any::<u64>(), gamma in 0.501f64..=1.0, dim in prop::sample::select(vec![16usize, 32]),
    ) {
        let labels = paint(dim, 1, &r);
        let slice = CtSlice::new(Array2::from_elem((dim, dim), 40.0), PixelSpacing::isotropic(0.8), "a", 0).unwrap();
        let targets = hard_to_soft(&labels, gamma, FillMode::Zero, LabelOrigin::PseudoLabel).unwrap();
        let policy = AugmentPolicy { seed, ..AugmentPolicy::default() };
        let t = sample_transform(&policy, &mut policy.rng_for(0, 0, 0));
        prop_assert!((0.9..=1.1).contains(&t.scale));
        prop_assert!((-25.0..=25.0).contains(&t.tx) && (-25.0..=25.0).contains(&t.ty));
        let (img, tgt) = apply(&t, &slice, &targets).unwrap();
        prop_assert_eq!(img.dim(), (dim, dim));
        prop_assert_eq!(tgt.targets().dim(), (dim, dim, NUM_CLASSES));
        prop_assert!(tgt.targets().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dice_is_symmetric_and_bounded(a in rects(5), b in rects(5)) {
        let ma = binary_lesion_mask(&paint(16, 1, &a));
        let mb = binary_lesion_mask(&paint(16, 1, &b));
        let d = dice(&ma, &mb).unwrap();
        prop_assert_eq!(d, dice(&mb, &ma).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn area_filter_is_idempotent_and_never_adds_lesions(r in rects(10), mm in 0.3f64..2.5) {
        let labels = paint(32, 1, &r);
        let spacing = PixelSpacing::isotropic(mm);
        let once = area_filter(&labels, spacing);
        prop_assert_eq!(area_filter(&once, spacing), once.clone());
        for (a, b) in once.codes().iter().zip(labels.codes()) {
            prop_assert!(!ClassId::is_lesion_code(*a) || a == b);
        }
    }

    #[test]
    fn liver_refine_never_adds_foreground(r in rects(8), m in rects(4)) {
        let labels = paint(16, 0, &r);
        let mask = paint(16, 0, &m).mask_where(|c| c != ClassId::Background);
        let refined = liver_refine(&labels, &mask).unwrap();
        for ((a, b), inside) in refined.codes().iter().zip(labels.codes()).zip(&mask) {
            prop_assert!(*a == 0 || (a == b && *inside));
        }
    }

    #[test]
    fn metric_identity_and_order_invariance(
        maps in prop::collection::vec((rects(3), rects(3)), 1..8), seed in any::<u64>(), all in any::<bool>(),
    ) {
        let gts: Vec<AnnotatedSlice> = maps.iter().enumerate().map(|(i, (g, _))| annotated(paint(16, 1, g), i)).collect();
        let preds: Vec<LabelMap> = maps.iter().map(|(_, p)| paint(16, 1, p)).collect();
        let options = EvalOptions {
            denominator: if all { SuccessDenominator::AllImages } else { SuccessDenominator::LesionImages },
            ..EvalOptions::default()
        };
        let r = evaluate_with(&preds, &gts, options).unwrap();
        match r.dice1 {
            Some(d1) => {
                prop_assert!((r.dice2 - d1 * r.success).abs() < 1e-9);
                prop_assert!(r.dice2 <= d1 + 1e-12);
            }
            None => prop_assert_eq!(r.dice2, 0.0),
        }

        let mut order: Vec<usize> = (0..gts.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let g2: Vec<_> = order.iter().map(|&i| gts[i].clone()).collect();
        let p2: Vec<_> = order.iter().map(|&i| preds[i].clone()).collect();
        let r2 = evaluate_with(&p2, &g2, options).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        prop_assert!(close(r.dice2, r2.dice2) && close(r.success, r2.success) && close(r.acc, r2.acc));
        prop_assert_eq!(r.dice1.is_some(), r2.dice1.is_some());
        if let (Some(a), Some(b)) = (r.dice1, r2.dice1) {
            prop_assert!(close(a, b));
        }
    }

    #[test]
    fn ground_truth_scores_perfectly(maps in prop::collection::vec(rects(3), 1..6)) {
        let gts: Vec<AnnotatedSlice> = maps.iter().enumerate().map(|(i, g)| annotated(paint(16, 1, g), i)).collect();
        let preds: Vec<LabelMap> = gts.iter().map(|a| a.labels.clone()).collect();
        let r = evaluate(&preds, &gts).unwrap();
        prop_assert_eq!(r.acc, 1.0);
        if r.n_lesion_images > 0 {
            prop_assert_eq!((r.dice1, r.dice2, r.success), (Some(1.0), 1.0, 1.0));
        }
    }

    #[test]
    fn summary_ignores_cell_order(
        scores in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, prop::option::of(0.0f64..1.0)), 6), seed in any::<u64>(),
    ) {
        let modes = [TrainingMode::Baseline, TrainingMode::Anatomical];
        let cells: Vec<CellResult> = scores
            .iter()
            .enumerate()
            .map(|(i, &(d2, acc, d1))| CellResult {
                mode: modes[i % 2],
                seed: (i / 2) as u64,
                dice1: d1,
                dice2: d2,
                success: 0.5,
                acc,
                config_digest: "x".into(),
            })
            .collect();
        let mut shuffled = cells.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = summarize(&cells).unwrap();
        let b = summarize(&shuffled).unwrap();
        prop_assert_eq!(a.to_csv(), b.to_csv());
        prop_assert_eq!(a.to_markdown(), b.to_markdown());
    }

    #[test]
    fn loss_is_homogeneous_and_linear_in_gamma(
        probs in prop::collection::vec(0.001f64..1.0, 6 * 5), codes in prop::collection::vec(0usize..6, 5), gamma in 0.501f64..=1.0,
    ) {
        let mut p = Array2::from_shape_vec((6, 5), probs).unwrap();
        for mut col in p.columns_mut() {
            let s = col.sum();
            col /= s;
        }
        let mut onehot = Array2::<f64>::zeros((6, 5));
        for (j, &c) in codes.iter().enumerate() {
            onehot[[c, j]] = 1.0;
        }
        let w = [0.3, 0.7, 1.1, 1.9, 0.5, 1.5];
        let w2 = w.map(|v| 2.0 * v);
        let l = soft_ce(p.view(), onehot.view(), &w).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(soft_ce(p.view(), onehot.view(), &w2).unwrap(), 2.0 * l);
        let soft = onehot.mapv(|t| t * gamma);
        prop_assert!((soft_ce(p.view(), soft.view(), &w).unwrap() - gamma * l).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn network_preserves_spatial_dims(
        h in prop::sample::select(vec![16usize, 32, 48]), w in prop::sample::select(vec![16usize, 32, 64]), b in 1usize..3,
    ) {
        let cfg = NetworkConfig { width_factor: 16, input_dims: (h, w), ..NetworkConfig::default() };
        let net = SegmentationNet::<f64>::init(&cfg).unwrap();
        let input = ndarray::Array3::<f64>::from_shape_fn((b, h, w), |(i, y, x)| ((i + y * 3 + x * 7) % 11) as f64 / 10.0);
        let probs = net.forward_probs(input.view(), ForwardMode::Eval).unwrap();
        prop_assert_eq!(probs.dim(), (6, b, h, w));
        for s in probs.sum_axis(ndarray::Axis(0)).iter() {
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn identity_augmentation_is_exact() {
    let labels = paint(32, 1, &[(3, 3, 3, 5, 6), (5, 10, 9, 4, 4)]);
    let pixels = Array2::from_shape_fn((32, 32), |(y, x)| (y * 13 + x * 7) as f32 % 200.0 - 50.0);
    let slice = CtSlice::new(pixels, PixelSpacing::isotropic(1.0), "i", 0).unwrap();
    let targets = hard_to_soft(&labels, 0.7, FillMode::Zero, LabelOrigin::PseudoLabel).unwrap();
    let (img, tgt) = apply(&GeomTransform::IDENTITY, &slice, &targets).unwrap();
    assert_eq!(img, slice);
    assert_eq!(tgt.targets(), targets.targets());
}

#[test]
fn sampled_scale_has_unit_mean() {
    let policy = AugmentPolicy { seed: 3, ..AugmentPolicy::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 100_000;
    let mean = (0..n).map(|_| sample_transform(&policy, &mut rng).scale).sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.002, "mean scale {mean}");
}

#[test]
fn scaling_a_disc_scales_its_radius() {
    let n = 64;
    let c = (n as f64 - 1.0) / 2.0;
    let codes = Array2::from_shape_fn((n, n), |(y, x)| {
        let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
        if d <= 12.0 { ClassId::Cyst.code() } else { ClassId::Liver.code() }
    });
    let labels = LabelMap::new(codes).unwrap();
    let slice = CtSlice::new(Array2::zeros((n, n)), PixelSpacing::isotropic(1.0), "d", 0).unwrap();
    let targets = hard_to_soft(&labels, 1.0, FillMode::Zero, LabelOrigin::GroundTruth).unwrap();
    let radius = |m: &LabelMap| (m.class_counts()[ClassId::Cyst as usize] as f64 / std::f64::consts::PI).sqrt();
    let r0 = radius(&labels);
    let t = GeomTransform { scale: 1.1, tx: 0.0, ty: 0.0 };
    let (_, out) = apply(&t, &slice, &targets).unwrap();
    let r1 = radius(&out.argmax());
    assert!((r1 - 1.1 * r0).abs() <= 1.0, "radius {r0:.2} -> {r1:.2}");
}

#[test]
fn eval_forward_is_bit_identical() {
    let cfg = NetworkConfig { width_factor: 16, input_dims: (32, 32), ..NetworkConfig::default() };
    let net = SegmentationNet::<f32>::init(&cfg).unwrap();
    let input = ndarray::Array3::<f32>::from_shape_fn((2, 32, 32), |(i, y, x)| ((i * 5 + y + 2 * x) % 9) as f32 / 9.0);
    let a = net.forward_probs(input.view(), ForwardMode::Eval).unwrap();
    let b = net.forward_probs(input.view(), ForwardMode::Eval).unwrap();
    assert_eq!(a, b);
}
