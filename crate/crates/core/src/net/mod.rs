//! Encoder-decoder pixel classifier.
//!
//! Layer sequence (channel counts shown at full width, all divided by
//! `width_factor` except the classifier head):
//!
//! ```text
//! encoder  C64 CBP64 C128 CBP128 C256 CBP256 C512 CBP512 C1024 CB1024
//! decoder  U2 C512 CB512 U2 C256 CBD256 U2 C128 CBD128 U2 CD64 C64 C(K,1)
//! ```
//!
//! `C` = conv+ReLU, `B` = batch norm, `D` = dropout, `P` = 2x2 max pool,
//! `U2` = 2x upsampling. The four pre-pool encoder activations are
//! concatenated onto the four equal-resolution upsampled decoder tensors.

mod checkpoint;
pub(crate) mod ops;
mod optim;

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{check_dims, argmax_lowest, CtSlice, LabelMap};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use optim::Sgd;
use ops::{cast, BatchNormCache, BatchStats, ConvCache};

/// Liver-window clipping applied before the network sees HU values.
pub const HU_WINDOW: (f32, f32) = (-160.0, 240.0);

/// Full-width encoder channel counts.
pub const BASE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 1024];

pub const MIN_CHANNELS: usize = 4;

/// Clips to [`HU_WINDOW`] and maps linearly onto `[0, 1]`.
pub fn normalize_hu<F: NdFloat>(hu: f32) -> F {
    let (lo, hi) = HU_WINDOW;
    cast::<F>(((hu.clamp(lo, hi) - lo) / (hi - lo)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// Learned 2x2 stride-2 transposed convolution.
    #[default]
    Deconv,
    /// Nearest-neighbour 2x followed by a 3x3 convolution.
    NearestConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub width_factor: usize,
    pub dropout_rate: f64,
    pub input_dims: (usize, usize),
    pub init_seed: u64,
    #[serde(default)]
    pub upsample: UpsampleMode,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_classes: crate::domain::NUM_CLASSES,
            width_factor: 8,
            dropout_rate: 0.5,
            input_dims: (64, 64),
            init_seed: 0,
            upsample: UpsampleMode::Deconv,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl NetworkConfig {
    pub fn encoder_channels(&self) -> Result<[usize; 5]> {
        if self.width_factor == 0 {
            return Err(Error::InvalidNetwork("width_factor must be positive".into()));
        }
        let mut out = [0; 5];
        for (o, &base) in out.iter_mut().zip(&BASE_CHANNELS) {
            if base % self.width_factor != 0 {
                return Err(Error::InvalidNetwork(format!(
                    "width_factor {} gives non-integral channel count {base}/{}",
                    self.width_factor, self.width_factor
                )));
            }
            *o = base / self.width_factor;
            if *o < MIN_CHANNELS {
                return Err(Error::InvalidNetwork(format!(
                    "width_factor {} gives {} channels (< {MIN_CHANNELS})",
                    self.width_factor, *o
                )));
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_channels()?;
        if self.num_classes < 2 {
            return Err(Error::InvalidNetwork("need at least two classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidNetwork(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::InvalidNetwork("bad batch-norm constants".into()));
        }
        check_dims(self.input_dims.0, self.input_dims.1)
    }
}

/// Named parameter or buffer array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: NdFloat> Tensor<F> {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name,
            shape,
            data: vec![F::zero(); n],
        }
    }

    fn filled(name: String, shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Self {
            name,
            shape,
            data: vec![v; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Total number of scalars across `params`.
pub fn count_parameters<F>(params: &[Tensor<F>]) -> usize {
    params.iter().map(|t| t.data.len()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BnSlots {
    scale: usize,
    shift: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    cin: usize,
    cout: usize,
    k: usize,
    relu: bool,
    dropout: bool,
    weight: usize,
    bias: usize,
    bn: Option<BnSlots>,
}

#[derive(Debug, Clone, PartialEq)]
enum Up {
    Deconv {
        cout: usize,
        weight: usize,
        bias: usize,
    },
    NearestConv(Block),
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    enc: Vec<Block>,
    ups: Vec<Up>,
    dec: Vec<Block>,
    head: Block,
}

struct Builder<'a, F> {
    params: Vec<Tensor<F>>,
    buffers: Vec<Tensor<F>>,
    rng: ChaCha8Rng,
    config: &'a NetworkConfig,
}

impl<F: NdFloat> Builder<'_, F> {
    fn he(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| cast::<F>(normal.sample(&mut self.rng))).collect();
        self.params.push(Tensor { name, shape, data });
        self.params.len() - 1
    }

    fn zeros(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.params.push(Tensor::zeros(name, shape));
        self.params.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        relu: bool,
        bn: bool,
        dropout: bool,
    ) -> Block {
        let weight = self.he(format!("{name}.conv.kernel"), vec![cout, cin, k, k], cin * k * k);
        let bias = self.zeros(format!("{name}.conv.bias"), vec![cout]);
        let bn = bn.then(|| {
            self.params
                .push(Tensor::filled(format!("{name}.bn.scale"), vec![cout], F::one()));
            let scale = self.params.len() - 1;
            let shift = self.zeros(format!("{name}.bn.shift"), vec![cout]);
            self.buffers
                .push(Tensor::zeros(format!("{name}.bn.running_mean"), vec![cout]));
            self.buffers
                .push(Tensor::filled(format!("{name}.bn.running_var"), vec![cout], F::one()));
            BnSlots {
                scale,
                shift,
                mean: self.buffers.len() - 2,
                var: self.buffers.len() - 1,
            }
        });
        Block {
            cin,
            cout,
            k,
            relu,
            dropout: dropout && self.config.dropout_rate > 0.0,
            weight,
            bias,
            bn,
        }
    }

    fn up(&mut self, name: &str, cin: usize, cout: usize) -> Up {
        match self.config.upsample {
            UpsampleMode::Deconv => {
                let weight = self.he(format!("{name}.deconv.kernel"), vec![cout, 2, 2, cin], cin);
                let bias = self.zeros(format!("{name}.deconv.bias"), vec![cout]);
                Up::Deconv { cout, weight, bias }
            }
            UpsampleMode::NearestConv => {
                Up::NearestConv(self.block(name, cin, cout, 3, false, false, false))
            }
        }
    }
}

fn build_layout<F: NdFloat>(config: &NetworkConfig) -> Result<(Layout, Vec<Tensor<F>>, Vec<Tensor<F>>)> {
    config.validate()?;
    let ch = config.encoder_channels()?;
    let mut b = Builder {
        params: Vec::new(),
        buffers: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        config,
    };
    let mut enc = Vec::with_capacity(10);
    let mut cin = 1;
    for (stage, &c) in ch.iter().enumerate() {
        let i = 2 * stage;
        enc.push(b.block(&format!("enc{}", i + 1), cin, c, 3, true, false, false));
        enc.push(b.block(&format!("enc{}", i + 2), c, c, 3, true, true, false));
        cin = c;
    }
    // decoder stage s runs at the resolution of encoder stage 3 - s
    let dropout_second = [false, true, true, false];
    let dropout_first = [false, false, false, true];
    let bn_second = [true, true, true, false];
    let mut ups = Vec::with_capacity(4);
    let mut dec = Vec::with_capacity(8);
    for s in 0..4 {
        let c = ch[3 - s];
        ups.push(b.up(&format!("up{}", s + 1), cin, c));
        dec.push(b.block(&format!("dec{}", 2 * s + 1), 2 * c, c, 3, true, false, dropout_first[s]));
        dec.push(b.block(&format!("dec{}", 2 * s + 2), c, c, 3, true, bn_second[s], dropout_second[s]));
        cin = c;
    }
    let head = b.block("head", cin, config.num_classes, 1, false, false, false);
    Ok((Layout { enc, ups, dec, head }, b.params, b.buffers))
}

/// Softmax output, `H x W x num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<F = f32> {
    pub probs: Array3<F>,
}

impl<F: NdFloat> Prediction<F> {
    pub fn num_classes(&self) -> usize {
        self.probs.dim().2
    }

    /// Per-pixel argmax; ties go to the lowest class code.
    pub fn hard_labels(&self) -> Array2<u8> {
        let (h, w, _) = self.probs.dim();
        let mut out = Array2::zeros((h, w));
        ndarray::Zip::from(&mut out)
            .and(self.probs.lanes(Axis(2)))
            .for_each(|o, v| *o = argmax_lowest(v) as u8);
        out
    }

    pub fn label_map(&self) -> Result<LabelMap> {
        LabelMap::new(self.hard_labels())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics and dropout drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

struct BlockTape<F> {
    conv: ConvCache<F>,
    activated: Option<Array4<F>>,
    bn: Option<BatchNormCache<F>>,
    dropout: Option<Array4<F>>,
}

enum UpTape<F> {
    Deconv { input: Array4<F> },
    NearestConv(BlockTape<F>),
}

/// Intermediate state of a train-mode forward pass, consumed by `backward`.
pub struct Tape<F> {
    enc: Vec<BlockTape<F>>,
    pools: Vec<(Vec<u8>, (usize, usize, usize, usize))>,
    ups: Vec<UpTape<F>>,
    dec: Vec<BlockTape<F>>,
    head: Option<BlockTape<F>>,
    skip_channels: Vec<usize>,
    batch_stats: Vec<(BnSlots, BatchStats<F>)>,
}

struct Pass<'a, F> {
    train: Option<ChaCha8Rng>,
    tape: Option<&'a mut Tape<F>>,
    stats: Vec<(BnSlots, BatchStats<F>)>,
    ablate_skip: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationNet<F = f32> {
    config: NetworkConfig,
    layout: Layout,
    params: Vec<Tensor<F>>,
    buffers: Vec<Tensor<F>>,
}

impl<F: NdFloat> SegmentationNet<F> {
    /// Deterministic He-normal initialization from `config.init_seed`.
    pub fn init(config: &NetworkConfig) -> Result<Self> {
        let (layout, params, buffers) = build_layout::<F>(config)?;
        Ok(Self {
            config: config.clone(),
            layout,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Tensor<F>] {
        &self.buffers
    }

    pub fn count_parameters(&self) -> usize {
        count_parameters(&self.params)
    }

    /// Copies into another float precision.
    pub fn cast<G: NdFloat>(&self) -> SegmentationNet<G> {
        let conv = |t: &Tensor<F>| Tensor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| cast::<G>(v.to_f64().unwrap())).collect(),
        };
        SegmentationNet {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(conv).collect(),
            buffers: self.buffers.iter().map(conv).collect(),
        }
    }

    pub(crate) fn from_parts(
        config: NetworkConfig,
        params: Vec<Tensor<F>>,
        buffers: Vec<Tensor<F>>,
    ) -> Result<Self> {
        let template = Self::init(&config)?;
        let check = |got: &[Tensor<F>], want: &[Tensor<F>]| -> Result<()> {
            if got.len() != want.len() {
                return Err(Error::InvalidNetwork(format!(
                    "expected {} arrays, found {}",
                    want.len(),
                    got.len()
                )));
            }
            for (g, w) in got.iter().zip(want) {
                if g.name != w.name || g.shape != w.shape || g.data.len() != w.data.len() {
                    return Err(Error::InvalidNetwork(format!(
                        "array {} {:?} does not match expected {} {:?}",
                        g.name, g.shape, w.name, w.shape
                    )));
                }
            }
            Ok(())
        };
        check(&params, &template.params)?;
        check(&buffers, &template.buffers)?;
        Ok(Self {
            layout: template.layout,
            config,
            params,
            buffers,
        })
    }

    /// Stacks slices into a normalized `(B, H, W)` batch.
    pub fn prepare_batch(slices: &[&CtSlice]) -> Result<Array3<F>> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidValue("empty batch".into()))?;
        let (h, w) = first.dim();
        let mut batch = Array3::<F>::zeros((slices.len(), h, w));
        for (mut plane, s) in batch.outer_iter_mut().zip(slices) {
            if s.dim() != (h, w) {
                return Err(Error::ShapeMismatch {
                    expected: vec![h, w],
                    actual: vec![s.dim().0, s.dim().1],
                });
            }
            ndarray::Zip::from(&mut plane)
                .and(s.pixels())
                .for_each(|o, &hu| *o = normalize_hu(hu));
        }
        Ok(batch)
    }

    /// Per-slice softmax predictions for a normalized `(B, H, W)` batch.
    pub fn forward(&self, input: ArrayView3<'_, F>, mode: ForwardMode) -> Result<Vec<Prediction<F>>> {
        let probs = self.forward_probs(input, mode)?;
        Ok(split_predictions(&probs))
    }

    /// Eval-mode predictions for raw HU slices.
    pub fn predict(&self, slices: &[&CtSlice]) -> Result<Vec<Prediction<F>>> {
        let batch = Self::prepare_batch(slices)?;
        self.forward(batch.view(), ForwardMode::Eval)
    }

    /// Softmax probabilities in `(K, B, H, W)` layout.
    pub fn forward_probs(&self, input: ArrayView3<'_, F>, mode: ForwardMode) -> Result<Array4<F>> {
        let logits = self.run(input, mode, None, None)?;
        Ok(softmax_channels(&logits))
    }

    /// Eval-mode probabilities with one encoder skip activation zeroed.
    pub fn forward_without_skip(&self, input: ArrayView3<'_, F>, skip: usize) -> Result<Array4<F>> {
        let logits = self.run(input, ForwardMode::Eval, None, Some(skip))?;
        Ok(softmax_channels(&logits))
    }

    /// Train-mode forward that records what `backward` needs. Returns
    /// softmax probabilities `(K, B, H, W)`.
    pub fn forward_train(&self, input: ArrayView3<'_, F>, dropout_seed: u64) -> Result<(Array4<F>, Tape<F>)> {
        let mut tape = Tape {
            enc: Vec::new(),
            pools: Vec::new(),
            ups: Vec::new(),
            dec: Vec::new(),
            head: None,
            skip_channels: Vec::new(),
            batch_stats: Vec::new(),
        };
        let logits = self.run(input, ForwardMode::Train { dropout_seed }, Some(&mut tape), None)?;
        Ok((softmax_channels(&logits), tape))
    }

    fn run(
        &self,
        input: ArrayView3<'_, F>,
        mode: ForwardMode,
        tape: Option<&mut Tape<F>>,
        ablate_skip: Option<usize>,
    ) -> Result<Array4<F>> {
        let (b, h, w) = input.dim();
        check_dims(h, w)?;
        if b == 0 {
            return Err(Error::InvalidValue("empty batch".into()));
        }
        let layout = &self.layout;
        let mut pass = Pass {
            train: match mode {
                ForwardMode::Train { dropout_seed } => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
                ForwardMode::Eval => None,
            },
            tape,
            stats: Vec::new(),
            ablate_skip,
        };

        let mut x = input
            .to_owned()
            .into_shape_with_order((1, b, h, w))
            .expect("same element count");
        let mut skips = Vec::with_capacity(4);
        for stage in 0..5 {
            x = self.block_forward(&layout.enc[2 * stage], &x, &mut pass, Section::Enc);
            x = self.block_forward(&layout.enc[2 * stage + 1], &x, &mut pass, Section::Enc);
            if stage < 4 {
                let (pooled, arg) = ops::maxpool_forward(&x);
                if let Some(t) = pass.tape.as_deref_mut() {
                    t.pools.push((arg, x.dim()));
                }
                let mut skip = x;
                if pass.ablate_skip == Some(stage) {
                    skip.fill(F::zero());
                }
                skips.push(skip);
                x = pooled;
            }
        }
        for (s, up) in layout.ups.iter().enumerate() {
            x = self.up_forward(up, &x, &mut pass);
            let skip = &skips[3 - s];
            if let Some(t) = pass.tape.as_deref_mut() {
                t.skip_channels.push(skip.dim().0);
            }
            x = ops::concat_channels(&x, skip);
            x = self.block_forward(&layout.dec[2 * s], &x, &mut pass, Section::Dec);
            x = self.block_forward(&layout.dec[2 * s + 1], &x, &mut pass, Section::Dec);
        }
        x = self.block_forward(&layout.head, &x, &mut pass, Section::Head);
        if let Some(t) = pass.tape {
            t.batch_stats = pass.stats;
        }
        Ok(x)
    }

    fn block_forward(&self, block: &Block, x: &Array4<F>, pass: &mut Pass<'_, F>, section: Section) -> Array4<F> {
        let (mut y, conv) = ops::conv_forward(
            x,
            &self.params[block.weight].data,
            &self.params[block.bias].data,
            block.cout,
            block.k,
        );
        let recording = pass.tape.is_some();
        if block.relu {
            ops::relu_inplace(&mut y);
        }
        let activated = (recording && block.relu).then(|| y.clone());
        let mut bn_cache = None;
        if let Some(slots) = block.bn {
            let scale = &self.params[slots.scale].data;
            let shift = &self.params[slots.shift].data;
            let eps = cast::<F>(self.config.bn_eps);
            if pass.train.is_some() {
                let (out, cache, stats) = ops::batchnorm_train(&y, scale, shift, eps);
                y = out;
                if recording {
                    bn_cache = Some(cache);
                    pass.stats.push((slots, stats));
                }
            } else {
                y = ops::batchnorm_eval(
                    &y,
                    scale,
                    shift,
                    &self.buffers[slots.mean].data,
                    &self.buffers[slots.var].data,
                    eps,
                );
            }
        }
        let mut mask = None;
        if block.dropout {
            if let Some(rng) = pass.train.as_mut() {
                let m = ops::dropout_mask::<F, _>(y.dim(), self.config.dropout_rate, rng);
                y *= &m;
                mask = Some(m);
            }
        }
        if let Some(t) = pass.tape.as_deref_mut() {
            let bt = BlockTape {
                conv,
                activated,
                bn: bn_cache,
                dropout: mask,
            };
            match section {
                Section::Enc => t.enc.push(bt),
                Section::Dec => t.dec.push(bt),
                Section::Head => t.head = Some(bt),
                Section::Up => t.ups.push(UpTape::NearestConv(bt)),
            }
        }
        y
    }

    fn up_forward(&self, up: &Up, x: &Array4<F>, pass: &mut Pass<'_, F>) -> Array4<F> {
        match up {
            Up::Deconv { cout, weight, bias } => {
                if let Some(t) = pass.tape.as_deref_mut() {
                    t.ups.push(UpTape::Deconv { input: x.clone() });
                }
                ops::deconv_forward(x, &self.params[*weight].data, &self.params[*bias].data, *cout)
            }
            Up::NearestConv(block) => {
                let up = ops::upsample_nearest(x);
                self.block_forward(block, &up, pass, Section::Up)
            }
        }
    }

    /// Gradients of the loss w.r.t. every parameter, given `dL/dlogits` in
    /// `(K, B, H, W)` layout. Returned in the order of [`Self::params`].
    pub fn backward(&self, tape: &Tape<F>, dlogits: &Array4<F>) -> Vec<Vec<F>> {
        let layout = &self.layout;
        let mut grads: Vec<Vec<F>> = self.params.iter().map(|t| vec![F::zero(); t.len()]).collect();

        let mut g = self
            .block_backward(&layout.head, tape.head.as_ref().expect("complete tape"), dlogits.clone(), &mut grads, true)
            .expect("input grad requested");
        let mut dskips: Vec<Option<Array4<F>>> = vec![None, None, None, None];
        for s in (0..4).rev() {
            g = self
                .block_backward(&layout.dec[2 * s + 1], &tape.dec[2 * s + 1], g, &mut grads, true)
                .expect("input grad requested");
            g = self
                .block_backward(&layout.dec[2 * s], &tape.dec[2 * s], g, &mut grads, true)
                .expect("input grad requested");
            let up_c = g.dim().0 - tape.skip_channels[s];
            let (gu, gs) = g.view().split_at(Axis(0), up_c);
            dskips[3 - s] = Some(gs.as_standard_layout().into_owned());
            let gu = gu.as_standard_layout().into_owned();
            g = self.up_backward(&layout.ups[s], &tape.ups[s], gu, &mut grads);
        }
        for stage in (0..5).rev() {
            if stage < 4 {
                let (arg, shape) = &tape.pools[stage];
                g = ops::maxpool_backward(&g, arg, *shape);
                if let Some(ds) = dskips[stage].take() {
                    g += &ds;
                }
            }
            g = self
                .block_backward(&layout.enc[2 * stage + 1], &tape.enc[2 * stage + 1], g, &mut grads, true)
                .expect("input grad requested");
            let need = stage > 0;
            match self.block_backward(&layout.enc[2 * stage], &tape.enc[2 * stage], g, &mut grads, need) {
                Some(next) => g = next,
                None => break,
            }
        }
        grads
    }

    fn block_backward(
        &self,
        block: &Block,
        tape: &BlockTape<F>,
        mut g: Array4<F>,
        grads: &mut [Vec<F>],
        need_input_grad: bool,
    ) -> Option<Array4<F>> {
        if let Some(mask) = &tape.dropout {
            g *= mask;
        }
        if let (Some(slots), Some(cache)) = (block.bn, &tape.bn) {
            let (ds, dh) = two_mut(grads, slots.scale, slots.shift);
            g = ops::batchnorm_backward(&g, cache, &self.params[slots.scale].data, ds, dh);
        }
        if let Some(act) = &tape.activated {
            ops::relu_backward_inplace(&mut g, act);
        }
        let (dw, db) = two_mut(grads, block.weight, block.bias);
        ops::conv_backward(
            &g,
            &tape.conv,
            &self.params[block.weight].data,
            block.k,
            dw,
            db,
            need_input_grad,
        )
    }

    fn up_backward(&self, up: &Up, tape: &UpTape<F>, g: Array4<F>, grads: &mut [Vec<F>]) -> Array4<F> {
        match (up, tape) {
            (Up::Deconv { weight, bias, .. }, UpTape::Deconv { input }) => {
                let (dw, db) = two_mut(grads, *weight, *bias);
                ops::deconv_backward(&g, input, &self.params[*weight].data, dw, db)
            }
            (Up::NearestConv(block), UpTape::NearestConv(bt)) => {
                let g = self
                    .block_backward(block, bt, g, grads, true)
                    .expect("input grad requested");
                ops::upsample_nearest_backward(&g)
            }
            _ => unreachable!("tape recorded by the same layout"),
        }
    }

    /// Folds the batch statistics of a train-mode pass into the running estimates.
    pub fn update_running_stats(&mut self, tape: &Tape<F>) {
        let m = cast::<F>(self.config.bn_momentum);
        let one_m = F::one() - m;
        for (slots, stats) in &tape.batch_stats {
            for (r, &v) in self.buffers[slots.mean].data.iter_mut().zip(&stats.mean) {
                *r = m * *r + one_m * v;
            }
            for (r, &v) in self.buffers[slots.var].data.iter_mut().zip(&stats.var) {
                *r = m * *r + one_m * v;
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Section {
    Enc,
    Dec,
    Up,
    Head,
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a != b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

fn softmax_channels<F: NdFloat>(logits: &Array4<F>) -> Array4<F> {
    let shape = logits.dim();
    let m = logits
        .view()
        .into_shape_with_order((shape.0, shape.1 * shape.2 * shape.3))
        .expect("standard layout");
    ops::softmax_columns(m)
        .into_shape_with_order(shape)
        .expect("same element count")
}

/// `(K, B, H, W)` probabilities into per-slice `H x W x K` predictions.
pub fn split_predictions<F: NdFloat>(probs: &Array4<F>) -> Vec<Prediction<F>> {
    let (_, b, _, _) = probs.dim();
    (0..b)
        .map(|i| {
            let chw = probs.index_axis(Axis(1), i);
            Prediction {
                probs: chw.permuted_axes([1, 2, 0]).as_standard_layout().into_owned(),
            }
        })
        .collect()
}
