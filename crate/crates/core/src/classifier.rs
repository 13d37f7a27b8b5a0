//! Densely connected convolutional classifier shared by stages 2 and 3.
//!
//! Layout: a patchifying stem, dense blocks joined by compressing
//! transitions, a pointwise projection to the feature map `A` (K channels),
//! global average pooling and a linear head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::layers::{avg_pool, avg_pool_backward};
use crate::nn::{Activation, Conv2d, ConvActCache, ConvSpec, Grads, Linear, ParamSet, ReluBackward, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_size: usize,
    /// Stem kernel and stride.
    pub stem_patch: usize,
    pub stem_channels: usize,
    /// Layers per dense block.
    pub blocks: Vec<usize>,
    pub growth: usize,
    /// Channel fraction kept by each transition.
    pub compression: f64,
    /// Channels of the final feature map.
    pub feature_channels: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: crate::CANONICAL_SIZE,
            stem_patch: 4,
            stem_channels: 8,
            blocks: vec![2, 2, 2],
            growth: 8,
            compression: 0.5,
            feature_channels: 64,
            num_classes: 2,
            activation: Activation::Relu,
            seed: 7,
        }
    }
}

impl BackboneConfig {
    /// Full-width variant with a 1024-channel feature map.
    pub fn wide() -> Self {
        BackboneConfig {
            feature_channels: 1024,
            ..Self::default()
        }
    }

    /// Tiny network for tests and gradient checks.
    pub fn miniature(input_size: usize) -> Self {
        BackboneConfig {
            input_size,
            stem_patch: 2,
            stem_channels: 2,
            blocks: vec![1, 1],
            growth: 2,
            compression: 0.5,
            feature_channels: 3,
            num_classes: 2,
            activation: Activation::Relu,
            seed: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return bad("every dense block needs at least one layer");
        }
        if self.stem_patch == 0 || self.stem_channels == 0 || self.growth == 0 {
            return bad("stem and growth sizes must be positive");
        }
        if self.feature_channels == 0 || self.num_classes < 2 {
            return bad("need at least one feature channel and two classes");
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad("compression must lie in (0, 1]");
        }
        let m = self.size_multiple();
        if self.input_size == 0 || !self.input_size.is_multiple_of(m) {
            return Err(Error::InvalidConfig(format!(
                "input size {} must be a positive multiple of {m}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn size_multiple(&self) -> usize {
        self.stem_patch << (self.blocks.len() - 1)
    }

    /// Side length of the feature map `A`.
    pub fn feature_size(&self) -> usize {
        self.input_size / self.size_multiple()
    }
}

#[derive(Clone, Debug)]
struct Transition {
    conv: Conv2d,
}

#[derive(Clone, Debug)]
pub(crate) struct Backbone {
    stem: Conv2d,
    blocks: Vec<Vec<Conv2d>>,
    transitions: Vec<Transition>,
    project: Conv2d,
    head: Linear,
    act: Activation,
}

impl Backbone {
    fn build(config: &BackboneConfig, params: &mut ParamSet) -> Backbone {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let p = config.stem_patch;
        let stem = Conv2d::new(
            params,
            "stem",
            ConvSpec::new(1, config.stem_channels, p, p, 0),
            &mut rng,
        );
        let mut channels = config.stem_channels;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (b, &layers) in config.blocks.iter().enumerate() {
            let mut block = Vec::new();
            for l in 0..layers {
                block.push(Conv2d::new(
                    params,
                    &format!("block{b}.layer{l}"),
                    ConvSpec::new(channels, config.growth, 3, 1, 1),
                    &mut rng,
                ));
                channels += config.growth;
            }
            blocks.push(block);
            if b + 1 < config.blocks.len() {
                let out = ((channels as f64 * config.compression).floor() as usize).max(1);
                transitions.push(Transition {
                    conv: Conv2d::new(
                        params,
                        &format!("transition{b}"),
                        ConvSpec::new(channels, out, 1, 1, 0),
                        &mut rng,
                    ),
                });
                channels = out;
            }
        }
        let project = Conv2d::new(
            params,
            "project",
            ConvSpec::new(channels, config.feature_channels, 1, 1, 0),
            &mut rng,
        );
        let head = Linear::new(params, "head", config.feature_channels, config.num_classes, &mut rng);
        Backbone {
            stem,
            blocks,
            transitions,
            project,
            head,
            act: config.activation,
        }
    }

    pub(crate) fn forward(&self, params: &ParamSet, x: &Tensor) -> ForwardRecord {
        let act = self.act;
        let (mut cur, stem) = self.stem.forward_act(params, act, x);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut transitions = Vec::with_capacity(self.transitions.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let mut caches = Vec::with_capacity(block.len());
            for layer in block {
                let (h, cache) = layer.forward_act(params, act, &cur);
                cur = cur.concat(&h);
                caches.push(cache);
            }
            blocks.push(caches);
            if let Some(t) = self.transitions.get(b) {
                let (h, cache) = t.conv.forward_act(params, act, &cur);
                let hw = (h.height(), h.width());
                cur = avg_pool(&h, 2);
                transitions.push((cache, hw));
            }
        }
        let (features, project) = self.project.forward_act(params, act, &cur);
        let pooled = features.channel_means();
        let logits = self.head.forward(params, &pooled);
        ForwardRecord {
            stem,
            blocks,
            transitions,
            project,
            features,
            pooled,
            logits,
        }
    }

    /// Gradient of the loss with respect to `A`, accumulating head gradients
    /// into `grads` when given.
    pub(crate) fn head_backward(
        &self,
        params: &ParamSet,
        record: &ForwardRecord,
        dlogits: &[f64],
        grads: Option<&mut Grads>,
    ) -> Tensor {
        let dpooled = self.head.backward(params, &record.pooled, dlogits, grads);
        let (c, h, w) = record.features.shape();
        let scale = 1.0 / (h * w) as f64;
        let mut da = Tensor::zeros(c, h, w);
        for (k, &d) in dpooled.iter().enumerate() {
            da.channel_mut(k).fill(d * scale);
        }
        da
    }

    /// Backpropagates `dlogits`; returns the input gradient when requested.
    pub(crate) fn backward(
        &self,
        params: &ParamSet,
        record: &ForwardRecord,
        dlogits: &[f64],
        mode: ReluBackward,
        mut grads: Option<&mut Grads>,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let act = self.act;
        let da = self.head_backward(params, record, dlogits, grads.as_deref_mut());
        let mut dcur = self
            .project
            .backward_act(params, act, mode, &record.project, &da, grads.as_deref_mut(), true)
            .expect("input grad requested");
        for b in (0..self.blocks.len()).rev() {
            if let Some(t) = self.transitions.get(b) {
                let (cache, hw) = &record.transitions[b];
                let dh = avg_pool_backward(&dcur, 2, *hw);
                dcur = t
                    .conv
                    .backward_act(params, act, mode, cache, &dh, grads.as_deref_mut(), true)
                    .expect("input grad requested");
            }
            for (layer, cache) in self.blocks[b].iter().zip(&record.blocks[b]).rev() {
                let keep = dcur.channels() - layer.spec.out_channels;
                let (mut dprev, dh) = dcur.split_channels(keep);
                let dx = layer
                    .backward_act(params, act, mode, cache, &dh, grads.as_deref_mut(), true)
                    .expect("input grad requested");
                dprev.add_assign(&dx);
                dcur = dprev;
            }
        }
        self.stem
            .backward_act(params, act, mode, &record.stem, &dcur, grads, need_input_grad)
    }

    pub(crate) fn head_weights<'a>(&self, params: &'a ParamSet) -> &'a [f64] {
        params.get(self.head.weight)
    }
}

/// Everything a forward pass keeps for attribution and backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    stem: ConvActCache,
    blocks: Vec<Vec<ConvActCache>>,
    transitions: Vec<(ConvActCache, (usize, usize))>,
    project: ConvActCache,
    /// The final feature map `A`.
    pub features: Tensor,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

/// A trained or freshly initialized classifier.
#[derive(Clone, Debug)]
pub struct StageModel {
    pub config: BackboneConfig,
    pub params: ParamSet,
    pub(crate) net: Backbone,
}

impl StageModel {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let net = Backbone::build(&config, &mut params);
        Ok(StageModel { config, params, net })
    }

    pub fn from_params(config: BackboneConfig, params: &ParamSet) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.params.load_from(params)?;
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_channels(&self) -> usize {
        self.config.feature_channels
    }

    pub fn input_tensor(&self, image: &Grid) -> Result<Tensor> {
        let n = self.config.input_size;
        if image.shape() != (n, n) {
            return Err(Error::ShapeMismatch(format!(
                "classifier expects {n}x{n} input, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        Ok(Tensor::from_grid(image))
    }

    pub fn forward(&self, image: &Grid) -> Result<ForwardRecord> {
        Ok(self.net.forward(&self.params, &self.input_tensor(image)?))
    }

    pub fn logits(&self, image: &Grid) -> Result<Vec<f64>> {
        Ok(self.forward(image)?.logits)
    }

    pub fn predict_proba(&self, image: &Grid) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(image)?))
    }

    /// Input gradient of `dlogits · logits` under the given ReLU rule.
    pub fn input_gradient(&self, record: &ForwardRecord, dlogits: &[f64], mode: ReluBackward) -> Grid {
        self.net
            .backward(&self.params, record, dlogits, mode, None, true)
            .expect("input grad requested")
            .channel_grid(0)
    }

    /// Parameter gradient of `dlogits · logits`.
    pub fn param_gradient(&self, record: &ForwardRecord, dlogits: &[f64]) -> Grads {
        let mut grads = self.params.zero_grads();
        self.net.backward(
            &self.params,
            record,
            dlogits,
            ReluBackward::Standard,
            Some(&mut grads),
            false,
        );
        grads
    }

    /// `d logits[target] / d A`.
    pub fn feature_gradient(&self, record: &ForwardRecord, target: usize) -> Result<Tensor> {
        self.check_target(target)?;
        let mut onehot = vec![0.0; self.num_classes()];
        onehot[target] = 1.0;
        Ok(self.net.head_backward(&self.params, record, &onehot, None))
    }

    /// Head weights for one class, one per feature channel.
    pub fn class_weights(&self, target: usize) -> Result<&[f64]> {
        self.check_target(target)?;
        let k = self.feature_channels();
        Ok(&self.net.head_weights(&self.params)[target * k..(target + 1) * k])
    }

    pub(crate) fn check_target(&self, target: usize) -> Result<()> {
        if target >= self.num_classes() {
            return Err(Error::TargetOutOfRange {
                target,
                classes: self.num_classes(),
            });
        }
        Ok(())
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}
