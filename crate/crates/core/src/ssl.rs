//! Semi-supervised training with pseudo-labeled neighbouring slices.
//!
//! 1. train on the labeled slices;
//! 2. label the unlabeled neighbours with that network, refined by a
//!    liver-only network;
//! 3. retrain on labeled and pseudo-labeled slices, the latter encoded with
//!    the reduced confidence `gamma`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, sample_transform, AugmentPolicy};
use crate::domain::{
    hard_to_soft, AnnotatedSlice, ClassId, CtSlice, DatasetSplit, FillMode, LabelMap, LabelOrigin,
    SoftLabelMap,
};
use crate::error::{Error, Result};
use crate::loss::{class_weights, soft_ce_grad, ClassWeights};
use crate::metrics::{evaluate_with, EvalOptions, EvaluationReport};
use crate::net::{NetworkConfig, SegmentationNet, Sgd};
use crate::postproc::{area_filter, liver_refine};
use crate::seed::{derive, substream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Baseline,
    Extended,
    Anatomical,
    AnatomicalGamma1,
    NeighborLabels,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 5] = [
        TrainingMode::Baseline,
        TrainingMode::Extended,
        TrainingMode::Anatomical,
        TrainingMode::AnatomicalGamma1,
        TrainingMode::NeighborLabels,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::Baseline => "baseline",
            TrainingMode::Extended => "extended",
            TrainingMode::Anatomical => "anatomical",
            TrainingMode::AnatomicalGamma1 => "anatomical_gamma1",
            TrainingMode::NeighborLabels => "neighbor_labels",
        }
    }

    /// Whether the mode trains on neighbouring slices.
    pub fn uses_neighbors(self) -> bool {
        matches!(
            self,
            TrainingMode::Anatomical | TrainingMode::AnatomicalGamma1 | TrainingMode::NeighborLabels
        )
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainingMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown training mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 8,
            epochs: 60,
        }
    }
}

/// Where post-processing runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostprocConfig {
    pub area_filter_pseudo: bool,
    pub area_filter_test: bool,
    pub liver_refine_test: bool,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            area_filter_pseudo: true,
            area_filter_test: true,
            liver_refine_test: true,
        }
    }
}

/// Initialization of the step-3 network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainInit {
    #[default]
    Fresh,
    /// Continue from the step-1 weights.
    Resume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslConfig {
    pub network: NetworkConfig,
    pub optim: OptimConfig,
    /// Geometric ranges; `augmentations_per_item` is the baseline count.
    pub policy: AugmentPolicy,
    pub extended_augmentations: usize,
    pub gamma: f64,
    pub retrain: RetrainInit,
    pub postproc: PostprocConfig,
    pub eval: EvalOptions,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            optim: OptimConfig::default(),
            policy: AugmentPolicy::default(),
            extended_augmentations: 6,
            gamma: 0.7,
            retrain: RetrainInit::Fresh,
            postproc: PostprocConfig::default(),
            eval: EvalOptions::default(),
            seed: 0,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.policy.validate()?;
        if self.optim.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.optim.learning_rate > 0.0 && self.optim.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.gamma > 0.5 && self.gamma <= 1.0) {
            return Err(Error::GammaOutOfRange(self.gamma));
        }
        Ok(())
    }

    /// Confidence given to neighbour targets in `mode`, if it uses any.
    pub fn gamma_for(&self, mode: TrainingMode) -> Option<f64> {
        match mode {
            TrainingMode::Anatomical | TrainingMode::NeighborLabels => Some(self.gamma),
            TrainingMode::AnatomicalGamma1 => Some(1.0),
            TrainingMode::Baseline | TrainingMode::Extended => None,
        }
    }

    pub fn augmentations_for(&self, mode: TrainingMode) -> usize {
        match mode {
            TrainingMode::Extended => self.extended_augmentations,
            _ => self.policy.augmentations_per_item,
        }
    }

    fn init_seed(&self) -> u64 {
        derive(self.seed, &[tag("init")])
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        derive(self.seed, &[tag("stage"), tag(stage)])
    }
}

/// Which target channels the network is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    /// All six classes.
    Lesion,
    /// Background against everything inside the liver.
    Liver,
}

impl TargetKind {
    pub fn num_classes(self) -> usize {
        match self {
            TargetKind::Lesion => crate::domain::NUM_CLASSES,
            TargetKind::Liver => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub network: NetworkConfig,
    pub optim: OptimConfig,
    pub policy: AugmentPolicy,
    pub target: TargetKind,
    /// Shuffling and dropout stream.
    pub seed: u64,
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub net: SegmentationNet,
    pub epoch_losses: Vec<f64>,
    pub samples_per_epoch: usize,
    pub steps: usize,
    pub class_weights: ClassWeights,
    pub lineage: String,
}

fn fill_targets(dst: &mut Array4<f32>, b: usize, targets: &SoftLabelMap, kind: TargetKind) {
    let t = targets.targets();
    match kind {
        TargetKind::Lesion => {
            for c in 0..t.dim().2 {
                dst.index_axis_mut(Axis(0), c)
                    .index_axis_mut(Axis(0), b)
                    .assign(&t.index_axis(Axis(2), c));
            }
        }
        TargetKind::Liver => {
            let bg = t.index_axis(Axis(2), ClassId::Background as usize);
            let inside = t.sum_axis(Axis(2)) - &bg;
            dst.index_axis_mut(Axis(0), 0).index_axis_mut(Axis(0), b).assign(&bg);
            dst.index_axis_mut(Axis(0), 1).index_axis_mut(Axis(0), b).assign(&inside);
        }
    }
}

/// Mini-batch SGD over augmented copies of `items`. `init` continues from
/// existing weights; otherwise the net is freshly initialized.
pub fn train_supervised(
    items: &[(CtSlice, SoftLabelMap)],
    weights: &ClassWeights,
    spec: &TrainSpec,
    init: Option<SegmentationNet>,
) -> Result<TrainOutcome> {
    if items.is_empty() {
        return Err(Error::InvalidValue("no training items".into()));
    }
    let k = spec.target.num_classes();
    if spec.network.num_classes != k || weights.len() != k {
        return Err(Error::Config(format!(
            "network has {} classes and weights {}, targets need {k}",
            spec.network.num_classes,
            weights.len()
        )));
    }
    spec.policy.validate()?;
    let (lineage, mut net) = match init {
        Some(net) => ("resume".to_string(), net),
        None => (
            format!("fresh(init_seed={})", spec.network.init_seed),
            SegmentationNet::init(&spec.network)?,
        ),
    };
    let (h, w) = items[0].0.dim();
    let augs = spec.policy.augmentations_per_item;
    let samples_per_epoch = items.len() * augs;
    let batch_size = spec.optim.batch_size.max(1);
    let wf = weights.cast::<f32>();
    let mut opt = Sgd::new(&net, spec.optim.learning_rate, spec.optim.momentum);
    let mut epoch_losses = Vec::with_capacity(spec.optim.epochs);
    let mut steps = 0;
    let mut log = match &spec.loss_log {
        Some(path) => {
            let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "epoch,loss,samples").map_err(|e| Error::io(path, e))?;
            Some((path.clone(), f))
        }
        None => None,
    };

    for epoch in 0..spec.optim.epochs {
        let mut order: Vec<(usize, usize)> = (0..items.len())
            .flat_map(|i| (0..augs).map(move |a| (i, a)))
            .collect();
        let mut rng = substream(spec.seed, &[tag("shuffle"), epoch as u64]);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let b = chunk.len();
            let mut slices = Vec::with_capacity(b);
            let mut targets = Array4::<f32>::zeros((k, b, h, w));
            for (bi, &(item, a)) in chunk.iter().enumerate() {
                let (slice, target) = &items[item];
                let t = sample_transform(&spec.policy, &mut spec.policy.rng_for(item as u64, epoch as u64, a as u64));
                let (s, tg) = augment::apply(&t, slice, target)?;
                fill_targets(&mut targets, bi, &tg, spec.target);
                slices.push(s);
            }
            let refs: Vec<&CtSlice> = slices.iter().collect();
            let input = SegmentationNet::<f32>::prepare_batch(&refs)?;
            let dropout_seed = derive(spec.seed, &[tag("dropout"), epoch as u64, steps as u64]);
            let (probs, tape) = net.forward_train(input.view(), dropout_seed)?;
            let n = b * h * w;
            let p2 = probs.view().into_shape_with_order((k, n)).expect("contiguous probabilities");
            let t2 = targets.view().into_shape_with_order((k, n)).expect("contiguous targets");
            let (loss, grad) = soft_ce_grad(p2, t2, &wf)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: loss as f64,
                });
            }
            let dlogits = grad.into_shape_with_order((k, b, h, w)).expect("same element count");
            let grads = net.backward(&tape, &dlogits);
            net.update_running_stats(&tape);
            opt.step(&mut net, &grads);
            loss_sum += loss as f64 * b as f64;
            steps += 1;
        }
        let epoch_loss = loss_sum / order.len() as f64;
        if let Some((path, f)) = &mut log {
            writeln!(f, "{epoch},{epoch_loss},{}", order.len()).map_err(|e| Error::io(&*path, e))?;
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(TrainOutcome {
        net,
        epoch_losses,
        samples_per_epoch,
        steps,
        class_weights: weights.clone(),
        lineage,
    })
}

const INFERENCE_BATCH: usize = 16;

/// Eval-mode hard labels, ties resolved to the lowest class code.
pub fn predict_labels(net: &SegmentationNet, slices: &[&CtSlice]) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(INFERENCE_BATCH) {
        for p in net.predict(chunk)? {
            out.push(LabelMap::new(p.hard_labels())?);
        }
    }
    Ok(out)
}

/// Liver masks from a 2-class network.
pub fn predict_liver_masks(liver_net: &SegmentationNet, slices: &[&CtSlice]) -> Result<Vec<ndarray::Array2<bool>>> {
    if liver_net.config().num_classes != 2 {
        return Err(Error::Config("liver network must have 2 classes".into()));
    }
    let mut out = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(INFERENCE_BATCH) {
        for p in liver_net.predict(chunk)? {
            out.push(p.hard_labels().mapv(|c| c == 1));
        }
    }
    Ok(out)
}

/// Segmentations with liver refinement and lesion area filtering as configured.
pub fn segment(
    net: &SegmentationNet,
    liver_net: Option<&SegmentationNet>,
    slices: &[&CtSlice],
    refine: bool,
    filter: bool,
) -> Result<Vec<LabelMap>> {
    let mut labels = predict_labels(net, slices)?;
    if refine {
        let liver_net = liver_net.ok_or_else(|| Error::Config("liver refinement needs a liver network".into()))?;
        let masks = predict_liver_masks(liver_net, slices)?;
        labels = labels
            .iter()
            .zip(&masks)
            .map(|(l, m)| liver_refine(l, m))
            .collect::<Result<_>>()?;
    }
    if filter {
        labels = labels
            .iter()
            .zip(slices)
            .map(|(l, s)| area_filter(l, s.spacing()))
            .collect();
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledSlice {
    pub slice: CtSlice,
    pub targets: SoftLabelMap,
    /// `(volume_id, z_index)` of the labeled slice this one neighbours.
    pub source_center: (String, usize),
}

/// Labels unlabeled slices with `net`, refined by `liver_net`, and encodes
/// them as soft targets of confidence `gamma`. Each entry of `slices` pairs
/// a slice with its labeled centre.
pub fn pseudo_label(
    net: &SegmentationNet,
    liver_net: &SegmentationNet,
    slices: &[(&CtSlice, (String, usize))],
    gamma: f64,
    area_filter_pseudo: bool,
) -> Result<Vec<PseudoLabeledSlice>> {
    if !(gamma > 0.5 && gamma <= 1.0) {
        return Err(Error::GammaOutOfRange(gamma));
    }
    let refs: Vec<&CtSlice> = slices.iter().map(|(s, _)| *s).collect();
    let labels = segment(net, Some(liver_net), &refs, true, area_filter_pseudo)?;
    slices
        .iter()
        .zip(labels)
        .map(|((s, center), l)| {
            Ok(PseudoLabeledSlice {
                slice: (*s).clone(),
                targets: hard_to_soft(&l, gamma, FillMode::Zero, LabelOrigin::PseudoLabel)?,
                source_center: center.clone(),
            })
        })
        .collect()
}

/// Ground-truth frequencies collapsed to background vs liver.
pub fn liver_class_weights(labeled: &[&AnnotatedSlice]) -> Result<ClassWeights> {
    let mut counts = [0u64; 2];
    for a in labeled {
        let c = a.labels.class_counts();
        counts[0] += c[0] as u64;
        counts[1] += c[1..].iter().sum::<usize>() as u64;
    }
    ClassWeights::inverse_frequency(&counts)
}

fn gt_items(dataset: &DatasetSplit) -> Result<Vec<(CtSlice, SoftLabelMap)>> {
    dataset
        .labeled()
        .map(|a| {
            Ok((
                a.slice.clone(),
                hard_to_soft(&a.labels, 1.0, FillMode::Zero, LabelOrigin::GroundTruth)?,
            ))
        })
        .collect()
}

/// Per-epoch sample accounting of one run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounters {
    pub labeled_items: usize,
    pub neighbor_items: usize,
    pub augmentations_per_item: usize,
    pub samples_per_epoch: usize,
    /// Network forward passes spent producing neighbour labels.
    pub labeling_forward_passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: TrainingMode,
    pub seed: u64,
    pub gamma: Option<f64>,
    pub epochs: usize,
    pub counters: SampleCounters,
    pub lineage: String,
    pub config_digest: String,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub mode: TrainingMode,
    pub net: SegmentationNet,
    pub report: EvaluationReport,
    pub predictions: Vec<LabelMap>,
    pub manifest: RunManifest,
}

/// Networks every mode of one seed depends on: the step-1 lesion network
/// (which is also the baseline) and the liver-only network.
#[derive(Debug, Clone)]
pub struct SharedNets {
    pub step1: TrainOutcome,
    pub liver: TrainOutcome,
}

impl SharedNets {
    pub fn train(dataset: &DatasetSplit, config: &SslConfig) -> Result<Self> {
        config.validate()?;
        let items = gt_items(dataset)?;
        let weights = class_weights(dataset)?;
        let step1 = train_supervised(&items, &weights, &stage_spec(config, "lesion", TrainingMode::Baseline), None)?;

        let labeled: Vec<&AnnotatedSlice> = dataset.labeled().collect();
        let liver_weights = liver_class_weights(&labeled)?;
        let mut liver_spec = stage_spec(config, "liver", TrainingMode::Baseline);
        liver_spec.network.num_classes = 2;
        liver_spec.network.init_seed = derive(config.seed, &[tag("liver-init")]);
        liver_spec.target = TargetKind::Liver;
        let liver = train_supervised(&items, &liver_weights, &liver_spec, None)?;
        Ok(Self { step1, liver })
    }
}

fn stage_spec(config: &SslConfig, stage: &str, mode: TrainingMode) -> TrainSpec {
    let mut network = config.network.clone();
    network.init_seed = config.init_seed();
    let policy = AugmentPolicy {
        augmentations_per_item: config.augmentations_for(mode),
        seed: config.stage_seed("augment"),
        ..config.policy
    };
    TrainSpec {
        network,
        optim: config.optim,
        policy,
        target: TargetKind::Lesion,
        seed: config.stage_seed(stage),
        loss_log: None,
    }
}

/// Training pool of a neighbour-using mode and the forward passes spent on it.
pub fn neighbor_pool(
    mode: TrainingMode,
    dataset: &DatasetSplit,
    config: &SslConfig,
    shared: Option<&SharedNets>,
) -> Result<(Vec<(CtSlice, SoftLabelMap)>, usize)> {
    let gamma = config
        .gamma_for(mode)
        .ok_or_else(|| Error::Config(format!("mode {mode} trains on labeled slices only")))?;
    let test_ids: std::collections::BTreeSet<&str> = dataset.test.iter().map(|a| a.slice.volume_id()).collect();
    let mut pool = Vec::new();
    let mut forward_passes = 0;
    match mode {
        TrainingMode::NeighborLabels => {
            for pack in &dataset.train {
                let t = hard_to_soft(&pack.labeled.labels, gamma, FillMode::Zero, LabelOrigin::PseudoLabel)?;
                for s in &pack.adjacent {
                    pool.push((s.clone(), t.clone()));
                }
            }
        }
        _ => {
            let shared = shared.ok_or_else(|| Error::Config("pseudo-labeling needs trained networks".into()))?;
            let adj: Vec<(&CtSlice, (String, usize))> = dataset
                .train
                .iter()
                .flat_map(|p| {
                    let center = (p.labeled.slice.volume_id().to_string(), p.labeled.slice.z_index());
                    p.adjacent.iter().map(move |s| (s, center.clone()))
                })
                .collect();
            let labeled = pseudo_label(
                &shared.step1.net,
                &shared.liver.net,
                &adj,
                gamma,
                config.postproc.area_filter_pseudo,
            )?;
            // one pass of the lesion net and one of the liver net per slice
            forward_passes = 2 * adj.len();
            pool.extend(labeled.into_iter().map(|p| (p.slice, p.targets)));
        }
    }
    if let Some((s, _)) = pool.iter().find(|(s, _)| test_ids.contains(s.volume_id())) {
        return Err(Error::InvalidValue(format!(
            "neighbour slice from test volume {} in the training pool",
            s.volume_id()
        )));
    }
    Ok((pool, forward_passes))
}

/// Test-set predictions after the configured post-processing, and their scores.
pub fn evaluate_net(
    net: &SegmentationNet,
    liver_net: &SegmentationNet,
    test: &[AnnotatedSlice],
    config: &SslConfig,
) -> Result<(EvaluationReport, Vec<LabelMap>)> {
    let refs: Vec<&CtSlice> = test.iter().map(|a| &a.slice).collect();
    let preds = segment(
        net,
        Some(liver_net),
        &refs,
        config.postproc.liver_refine_test,
        config.postproc.area_filter_test,
    )?;
    let report = evaluate_with(&preds, test, config.eval)?;
    Ok((report, preds))
}

/// Runs one mode given the seed's shared networks.
pub fn run_mode_with(
    mode: TrainingMode,
    dataset: &DatasetSplit,
    config: &SslConfig,
    shared: &SharedNets,
) -> Result<RunOutcome> {
    config.validate()?;
    let n = dataset.train.len();
    let (outcome, neighbor_items, passes) = match mode {
        TrainingMode::Baseline => (shared.step1.clone(), 0, 0),
        TrainingMode::Extended => {
            let items = gt_items(dataset)?;
            let out = train_supervised(&items, &shared.step1.class_weights, &stage_spec(config, "lesion", mode), None)?;
            (out, 0, 0)
        }
        _ => {
            let (pool, passes) = neighbor_pool(mode, dataset, config, Some(shared))?;
            let neighbor_items = pool.len();
            let mut items = gt_items(dataset)?;
            items.extend(pool);
            let init = match config.retrain {
                RetrainInit::Fresh => None,
                RetrainInit::Resume => Some(shared.step1.net.clone()),
            };
            let mut out = train_supervised(&items, &shared.step1.class_weights, &stage_spec(config, "lesion", mode), init)?;
            if config.retrain == RetrainInit::Resume {
                out.lineage = "resume(step1)".into();
            }
            (out, neighbor_items, passes)
        }
    };
    let (report, predictions) = evaluate_net(&outcome.net, &shared.liver.net, &dataset.test, config)?;
    let counters = SampleCounters {
        labeled_items: n,
        neighbor_items,
        augmentations_per_item: config.augmentations_for(mode),
        samples_per_epoch: outcome.samples_per_epoch,
        labeling_forward_passes: passes,
    };
    Ok(RunOutcome {
        mode,
        report,
        predictions,
        manifest: RunManifest {
            mode,
            seed: config.seed,
            gamma: config.gamma_for(mode),
            epochs: config.optim.epochs,
            counters,
            lineage: outcome.lineage.clone(),
            config_digest: String::new(),
            epoch_losses: outcome.epoch_losses.clone(),
        },
        net: outcome.net,
    })
}

/// Trains the shared networks and runs a single mode.
pub fn run_mode(mode: TrainingMode, dataset: &DatasetSplit, config: &SslConfig) -> Result<RunOutcome> {
    let shared = SharedNets::train(dataset, config)?;
    run_mode_with(mode, dataset, config, &shared)
}
