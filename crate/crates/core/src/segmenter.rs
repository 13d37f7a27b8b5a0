//! Stage 1: lung segmentation with a small encoder-decoder network.
//!
//! The network runs on a block-averaged copy of the image (`input_scale`) and
//! its per-pixel probabilities are resized back to the input resolution before
//! thresholding.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::batch::{BalancedBatcher, Group};
use crate::data::corpus::LabeledSample;
use crate::data::image::CxrImage;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::layers::{max_pool2, max_pool2_backward, upsample2, upsample2_backward};
use crate::nn::{Activation, Conv2d, ConvActCache, ConvSpec, Grads, ParamSet, ReluBackward, Tensor};
use crate::par::{self, Execution};
use crate::trainer::{optimize, EpochRecord, TrainConfig};

/// Binary lung mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LungMask(Grid);

impl LungMask {
    /// Fails unless every value is exactly 0 or 1.
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(LungMask(grid))
    }

    pub(crate) fn from_binary_unchecked(grid: Grid) -> Self {
        LungMask(grid)
    }

    /// Thresholds soft values at 0.5 (inclusive).
    pub fn from_soft(grid: &Grid) -> Self {
        LungMask(grid.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
    }

    pub fn ones(height: usize, width: usize) -> Self {
        LungMask(Grid::filled(height, width, 1.0))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LungMask(Grid::zeros(height, width))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.0.data().iter().filter(|&&v| v > 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }
}

/// Dice similarity `2|a∩b| / (|a|+|b|)`; two empty masks score 1.
pub fn dice(a: &LungMask, b: &LungMask) -> Result<f64> {
    a.0.ensure_same_shape(&b.0)?;
    let mut inter = 0usize;
    for (&x, &y) in a.0.data().iter().zip(b.0.data()) {
        if x > 0.0 && y > 0.0 {
            inter += 1;
        }
    }
    let total = a.area() + b.area();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Zeroes every pixel outside the mask.
pub fn mask_grid(image: &Grid, mask: &LungMask) -> Result<Grid> {
    image.zip_with(&mask.0, |v, m| if m > 0.0 { v } else { 0.0 })
}

pub fn apply_mask(image: &CxrImage, mask: &LungMask) -> Result<CxrImage> {
    Ok(CxrImage {
        pixels: mask_grid(&image.pixels, mask)?,
        source_id: image.source_id.clone(),
        capture_date: image.capture_date,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    /// Number of resolution levels, bottleneck included.
    pub depth: usize,
    pub base_channels: usize,
    /// Block-averaging factor applied before the network.
    pub input_scale: usize,
    #[serde(default)]
    pub activation: Activation,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            depth: 4,
            base_channels: 8,
            input_scale: 8,
            activation: Activation::Relu,
            seed: 7,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.base_channels == 0 || self.input_scale == 0 {
            return Err(Error::InvalidConfig(
                "segmenter needs depth >= 2, base_channels >= 1 and input_scale >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Input sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        self.input_scale << (self.depth - 1)
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    first: Conv2d,
    second: Conv2d,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv2d,
    first: Conv2d,
    second: Conv2d,
}

#[derive(Clone, Debug)]
struct UNet {
    encoder: Vec<EncoderLevel>,
    decoder: Vec<DecoderLevel>,
    output: Conv2d,
}

impl UNet {
    fn build(config: &SegmenterConfig, params: &mut ParamSet) -> UNet {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let conv3 = |cin, cout| ConvSpec::new(cin, cout, 3, 1, 1);
        let mut encoder = Vec::new();
        let mut cin = 1;
        for l in 0..config.depth {
            let c = config.channels(l);
            encoder.push(EncoderLevel {
                first: Conv2d::new(params, &format!("enc{l}.conv1"), conv3(cin, c), &mut rng),
                second: Conv2d::new(params, &format!("enc{l}.conv2"), conv3(c, c), &mut rng),
            });
            cin = c;
        }
        let mut decoder = Vec::new();
        for l in 0..config.depth - 1 {
            let c = config.channels(l);
            decoder.push(DecoderLevel {
                up: Conv2d::new(params, &format!("dec{l}.up"), conv3(2 * c, c), &mut rng),
                first: Conv2d::new(params, &format!("dec{l}.conv1"), conv3(2 * c, c), &mut rng),
                second: Conv2d::new(params, &format!("dec{l}.conv2"), conv3(c, c), &mut rng),
            });
        }
        let output = Conv2d::new(params, "out", ConvSpec::new(config.base_channels, 1, 1, 1, 0), &mut rng);
        UNet {
            encoder,
            decoder,
            output,
        }
    }
}

struct EncoderTrace {
    first: ConvActCache,
    second: ConvActCache,
    pool_arg: Option<Vec<usize>>,
    shape: (usize, usize, usize),
}

struct DecoderTrace {
    up: ConvActCache,
    first: ConvActCache,
    second: ConvActCache,
    skip_channels: usize,
}

struct SegTrace {
    encoder: Vec<EncoderTrace>,
    decoder: Vec<DecoderTrace>,
    output: crate::nn::layers::ConvCache,
    logits: Grid,
}

#[derive(Clone, Debug)]
pub struct SegmenterModel {
    pub config: SegmenterConfig,
    pub params: ParamSet,
    net: UNet,
}

impl SegmenterModel {
    /// Freshly initialized model (He-uniform weights, zero biases).
    pub fn new(config: SegmenterConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let net = UNet::build(&config, &mut params);
        Ok(SegmenterModel { config, params, net })
    }

    /// Rebuilds the layout for `config` and loads `params` into it.
    pub fn from_params(config: SegmenterConfig, params: &ParamSet) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    fn check_input(&self, image: &Grid) -> Result<()> {
        let m = self.config.size_multiple();
        if !image.height().is_multiple_of(m) || !image.width().is_multiple_of(m) || image.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "segmenter input {}x{} must be a nonzero multiple of {m}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    fn network_input(&self, image: &Grid) -> Result<Tensor> {
        self.check_input(image)?;
        Ok(Tensor::from_grid(&image.avg_pool(self.config.input_scale)?))
    }

    fn forward_trace(&self, x: &Tensor) -> SegTrace {
        self.net.forward_trace(&self.params, self.config.activation, x)
    }

    /// Per-pixel lung probabilities at the input resolution.
    pub fn predict_probabilities(&self, image: &Grid) -> Result<Grid> {
        let x = self.network_input(image)?;
        let trace = self.forward_trace(&x);
        let probs = trace.logits.map(sigmoid);
        Ok(probs.resize_bilinear(image.height(), image.width()))
    }
}

impl UNet {
    fn forward_trace(&self, p: &ParamSet, act: Activation, x: &Tensor) -> SegTrace {
        let mut encoder = Vec::with_capacity(self.encoder.len());
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut cur = x.clone();
        let last = self.encoder.len() - 1;
        for (l, level) in self.encoder.iter().enumerate() {
            let shape = cur.shape();
            let (h1, first) = level.first.forward_act(p, act, &cur);
            let (h2, second) = level.second.forward_act(p, act, &h1);
            let pool_arg = if l < last {
                let (pooled, arg) = max_pool2(&h2);
                cur = pooled;
                Some(arg)
            } else {
                cur = h2.clone();
                None
            };
            skips.push(h2);
            encoder.push(EncoderTrace {
                first,
                second,
                pool_arg,
                shape,
            });
        }
        let mut decoder: Vec<Option<DecoderTrace>> = (0..self.decoder.len()).map(|_| None).collect();
        for l in (0..self.decoder.len()).rev() {
            let level = &self.decoder[l];
            let (hu, up) = level.up.forward_act(p, act, &upsample2(&cur));
            let cat = skips[l].concat(&hu);
            let (ha, first) = level.first.forward_act(p, act, &cat);
            let (hb, second) = level.second.forward_act(p, act, &ha);
            cur = hb;
            decoder[l] = Some(DecoderTrace {
                up,
                first,
                second,
                skip_channels: skips[l].channels(),
            });
        }
        let (logit, output) = self.output.forward(p, &cur);
        SegTrace {
            encoder,
            decoder: decoder.into_iter().map(|d| d.expect("every level traced")).collect(),
            output,
            logits: logit.channel_grid(0),
        }
    }

    fn backward(&self, p: &ParamSet, act: Activation, trace: &SegTrace, dlogits: &Grid, grads: &mut Grads) {
        let mode = ReluBackward::Standard;
        let dl = Tensor::from_grid(dlogits);
        let mut dcur = self
            .output
            .backward(p, &trace.output, &dl, Some(grads), true)
            .expect("input grad requested");
        let mut dskips: Vec<Option<Tensor>> = (0..self.encoder.len()).map(|_| None).collect();
        for (l, (level, t)) in self.decoder.iter().zip(&trace.decoder).enumerate() {
            let dha = level
                .second
                .backward_act(p, act, mode, &t.second, &dcur, Some(grads), true)
                .expect("input grad requested");
            let dcat = level
                .first
                .backward_act(p, act, mode, &t.first, &dha, Some(grads), true)
                .expect("input grad requested");
            let (dskip, dhu) = dcat.split_channels(t.skip_channels);
            dskips[l] = Some(dskip);
            let du = level
                .up
                .backward_act(p, act, mode, &t.up, &dhu, Some(grads), true)
                .expect("input grad requested");
            dcur = upsample2_backward(&du);
        }
        // `dcur` now holds the gradient of the bottleneck output.
        let last = self.encoder.len() - 1;
        let mut dpooled: Option<Tensor> = None;
        for l in (0..=last).rev() {
            let t = &trace.encoder[l];
            let level = &self.encoder[l];
            let dh2 = if l == last {
                dcur.clone()
            } else {
                let mut d = dskips[l].take().expect("decoder produced skip gradient");
                let dp = dpooled.take().expect("deeper level produced pooled gradient");
                d.add_assign(&max_pool2_backward(
                    &dp,
                    t.pool_arg.as_ref().expect("pooled level"),
                    t.second.out.shape(),
                ));
                d
            };
            let dh1 = level
                .second
                .backward_act(p, act, mode, &t.second, &dh2, Some(grads), true)
                .expect("input grad requested");
            let dx = level
                .first
                .backward_act(p, act, mode, &t.first, &dh1, Some(grads), l > 0);
            debug_assert!(l == 0 || dx.as_ref().map(Tensor::shape) == Some(t.shape));
            dpooled = dx;
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    pub mask: LungMask,
    /// No pixel reached the threshold.
    pub empty_mask: bool,
}

/// Thresholds the segmenter's probabilities at 0.5.
pub fn predict_mask(image: &Grid, model: &SegmenterModel) -> Result<MaskPrediction> {
    let mask = LungMask::from_soft(&model.predict_probabilities(image)?);
    let empty_mask = mask.is_empty();
    if empty_mask {
        log::warn!("empty_mask: segmenter found no lung pixels");
    }
    Ok(MaskPrediction { mask, empty_mask })
}

/// Pixel-averaged binary cross-entropy plus soft Dice, with the gradient
/// with respect to the logits.
pub(crate) fn segmentation_loss(logits: &Grid, target: &Grid) -> (f64, Grid) {
    let n = logits.len() as f64;
    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut psum = 0.0;
    let tsum: f64 = target.sum();
    let probs: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z)).collect();
    for ((&z, &t), &p) in logits.data().iter().zip(target.data()).zip(&probs) {
        bce += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        inter += p * t;
        psum += p;
    }
    bce /= n;
    const SMOOTH: f64 = 1.0;
    let denom = psum + tsum + SMOOTH;
    let dice_score = (2.0 * inter + SMOOTH) / denom;
    let loss = bce + (1.0 - dice_score);
    let grad: Vec<f64> = probs
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d_dice_dp = (2.0 * t * denom - (2.0 * inter + SMOOTH)) / (denom * denom);
            (p - t) / n - d_dice_dp * p * (1.0 - p)
        })
        .collect();
    (
        loss,
        Grid::new(logits.height(), logits.width(), grad).expect("same shape as logits"),
    )
}

#[derive(Clone, Debug)]
pub struct TrainedSegmenter {
    pub model: SegmenterModel,
    pub history: Vec<EpochRecord>,
}

struct SegItem {
    input: Tensor,
    target: Grid,
}

/// Trains stage 1 on samples that carry ground-truth masks. Validation Dice
/// is recorded per epoch when `val` is nonempty.
pub fn train_segmenter(
    train: &[&LabeledSample],
    val: &[&LabeledSample],
    config: &SegmenterConfig,
    train_config: &TrainConfig,
) -> Result<TrainedSegmenter> {
    train_segmenter_with(train, val, config, train_config, Execution::default())
}

pub fn train_segmenter_with(
    train: &[&LabeledSample],
    val: &[&LabeledSample],
    config: &SegmenterConfig,
    train_config: &TrainConfig,
    exec: Execution,
) -> Result<TrainedSegmenter> {
    train_config.validate()?;
    let mut model = SegmenterModel::new(config.clone())?;
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(s) = train.iter().chain(val).find(|s| s.mask.is_none()) {
        return Err(Error::MissingMask(s.source_id().to_string()));
    }
    if train_config.epochs == 0 {
        return Ok(TrainedSegmenter {
            model,
            history: Vec::new(),
        });
    }
    let mut order: Vec<&LabeledSample> = train.to_vec();
    order.sort_by(|a, b| a.source_id().cmp(b.source_id()));
    let items = par::map_slice(exec, &order, |s| -> Result<SegItem> {
        let mask = s.mask.as_ref().expect("checked above");
        Ok(SegItem {
            input: model.network_input(&s.image.pixels)?,
            target: mask.grid().avg_pool(config.input_scale)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let batcher = BalancedBatcher::new(
        vec![Group::new("all", (0..items.len()).collect())],
        train_config.batch_size,
        train_config.seed,
    )?;
    let net = model.net.clone();
    let seg_config = model.config.clone();
    let act = seg_config.activation;
    let sample_grad = |params: &ParamSet, i: usize| {
        let trace = net.forward_trace(params, act, &items[i].input);
        let (loss, dlogits) = segmentation_loss(&trace.logits, &items[i].target);
        let mut grads = params.zero_grads();
        net.backward(params, act, &trace, &dlogits, &mut grads);
        (loss, grads)
    };
    let validate = |params: &ParamSet| {
        let mut m = BTreeMap::new();
        if !val.is_empty() {
            let candidate = SegmenterModel {
                config: seg_config.clone(),
                params: params.clone(),
                net: net.clone(),
            };
            if let Ok(d) = mean_dice(&candidate, val, exec) {
                m.insert("val_dice".to_string(), d);
            }
        }
        m
    };
    let history = match optimize(&mut model.params, &batcher, train_config, exec, sample_grad, validate) {
        Ok(h) => h,
        Err(d) => {
            return Err(Error::Diverged {
                epoch: d.epoch,
                last_finite: Box::new(crate::checkpoint::CheckpointBundle::for_segmenter(
                    &SegmenterModel::from_params(seg_config, &d.last_finite)?,
                    d.history,
                    train_config.seed,
                )),
            })
        }
    };
    Ok(TrainedSegmenter { model, history })
}

/// Mean Dice between predicted and ground-truth masks.
pub fn mean_dice(model: &SegmenterModel, samples: &[&LabeledSample], exec: Execution) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let scores = par::map_slice(exec, samples, |s| -> Result<f64> {
        let truth = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::MissingMask(s.source_id().to_string()))?;
        dice(&predict_mask(&s.image.pixels, model)?.mask, truth)
    });
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / samples.len() as f64)
}
