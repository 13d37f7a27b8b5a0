use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gemm::{gemm, MatRef};
use super::params::{Grads, ParamId, ParamSet};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// Pass-through; used to check attribution code against plain gradients.
    Identity,
}

/// How a ReLU routes gradient on the way back.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReluBackward {
    #[default]
    Standard,
    /// Guided backpropagation: only positive gradient through active units.
    Guided,
}

impl Activation {
    pub fn forward(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Identity => x.clone(),
            Activation::Relu => {
                let mut y = x.clone();
                y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                y
            }
        }
    }

    /// `out` is the forward output of this activation.
    pub fn backward(self, mode: ReluBackward, out: &Tensor, dy: &Tensor) -> Tensor {
        match self {
            Activation::Identity => dy.clone(),
            Activation::Relu => {
                let mut dx = dy.clone();
                let guided = mode == ReluBackward::Guided;
                for (d, &o) in dx.data_mut().iter_mut().zip(out.data()) {
                    if o <= 0.0 || (guided && *d < 0.0) {
                        *d = 0.0;
                    }
                }
                dx
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (o(h), o(w))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Unfolded input patches, `patch_len x out_pixels`.
#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, spec: ConvSpec, rng: &mut R) -> Self {
        let weight = params.push_he_uniform(
            format!("{name}.weight"),
            vec![spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
            spec.patch_len(),
            rng,
        );
        let bias = params.push_zeros(format!("{name}.bias"), vec![spec.out_channels]);
        Conv2d { spec, weight, bias }
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> (Tensor, ConvCache) {
        let s = &self.spec;
        assert_eq!(x.channels(), s.in_channels, "conv input channels");
        let (ho, wo) = s.output_size(x.height(), x.width());
        let cols = if s.is_pointwise() {
            x.data().to_vec()
        } else {
            im2col(x, s, ho, wo)
        };
        let p = ho * wo;
        let bias = params.get(self.bias);
        let mut out = vec![0.0; s.out_channels * p];
        for (o, chunk) in out.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[o]);
        }
        gemm(
            MatRef::new(params.get(self.weight), s.out_channels, s.patch_len()),
            MatRef::new(&cols, s.patch_len(), p),
            1.0,
            &mut out,
        );
        let y = Tensor::new(s.out_channels, ho, wo, out).expect("conv output shape");
        (
            y,
            ConvCache {
                cols,
                in_shape: x.shape(),
                out_hw: (ho, wo),
            },
        )
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns
    /// the input gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &ConvCache,
        dy: &Tensor,
        grads: Option<&mut Grads>,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let s = &self.spec;
        let p = cache.out_hw.0 * cache.out_hw.1;
        let k = s.patch_len();
        debug_assert_eq!(dy.data().len(), s.out_channels * p);
        if let Some(grads) = grads {
            gemm(
                MatRef::new(dy.data(), s.out_channels, p),
                MatRef::new(&cache.cols, k, p).t(),
                1.0,
                grads.get_mut(self.weight),
            );
            let db = grads.get_mut(self.bias);
            for (o, chunk) in dy.data().chunks(p).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![0.0; k * p];
        gemm(
            MatRef::new(params.get(self.weight), s.out_channels, k).t(),
            MatRef::new(dy.data(), s.out_channels, p),
            0.0,
            &mut dcols,
        );
        let (c, h, w) = cache.in_shape;
        if s.is_pointwise() {
            return Some(Tensor::new(c, h, w, dcols).expect("pointwise grad shape"));
        }
        Some(col2im(&dcols, s, cache.in_shape, cache.out_hw))
    }
}

fn im2col(x: &Tensor, s: &ConvSpec, ho: usize, wo: usize) -> Vec<f64> {
    let (h, w) = (x.height() as isize, x.width() as isize);
    let p = ho * wo;
    let mut cols = vec![0.0; s.patch_len() * p];
    let mut row = 0;
    for c in 0..s.in_channels {
        let plane = x.channel(c);
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                        if ix >= 0 && ix < w {
                            *d = src_row[ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], s: &ConvSpec, in_shape: (usize, usize, usize), out_hw: (usize, usize)) -> Tensor {
    let (c_in, h, w) = in_shape;
    let (ho, wo) = out_hw;
    let p = ho * wo;
    let mut dx = Tensor::zeros(c_in, h, w);
    let mut row = 0;
    for c in 0..c_in {
        let plane = dx.channel_mut(c);
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let src = &dcols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

/// Cache of a convolution followed by an activation.
#[derive(Clone, Debug)]
pub struct ConvActCache {
    conv: ConvCache,
    pub out: Tensor,
}

impl Conv2d {
    pub fn forward_act(&self, params: &ParamSet, act: Activation, x: &Tensor) -> (Tensor, ConvActCache) {
        let (z, conv) = self.forward(params, x);
        let out = act.forward(&z);
        (out.clone(), ConvActCache { conv, out })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward_act(
        &self,
        params: &ParamSet,
        act: Activation,
        mode: ReluBackward,
        cache: &ConvActCache,
        dy: &Tensor,
        grads: Option<&mut Grads>,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let dz = act.backward(mode, &cache.out, dy);
        self.backward(params, &cache.conv, &dz, grads, need_input_grad)
    }
}

/// Fully connected layer `y = W x + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let weight = params.push_he_uniform(format!("{name}.weight"), vec![outputs, inputs], inputs, rng);
        let bias = params.push_zeros(format!("{name}.bias"), vec![outputs]);
        Linear {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        let w = params.get(self.weight);
        let b = params.get(self.bias);
        (0..self.outputs)
            .map(|o| {
                b[o] + w[o * self.inputs..(o + 1) * self.inputs]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &ParamSet, x: &[f64], dy: &[f64], grads: Option<&mut Grads>) -> Vec<f64> {
        if let Some(grads) = grads {
            let dw = grads.get_mut(self.weight);
            for o in 0..self.outputs {
                for i in 0..self.inputs {
                    dw[o * self.inputs + i] += dy[o] * x[i];
                }
            }
            let db = grads.get_mut(self.bias);
            for o in 0..self.outputs {
                db[o] += dy[o];
            }
        }
        let w = params.get(self.weight);
        (0..self.inputs)
            .map(|i| (0..self.outputs).map(|o| w[o * self.inputs + i] * dy[o]).sum())
            .collect()
    }
}

/// Non-overlapping average pooling by `factor`.
pub fn avg_pool(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = x.shape();
    let (ho, wo) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = Tensor::zeros(c, ho, wo);
    for k in 0..c {
        let src = x.channel(k);
        let dst = out.channel_mut(k);
        for y in 0..ho * factor {
            for xx in 0..wo * factor {
                dst[(y / factor) * wo + xx / factor] += src[y * w + xx];
            }
        }
        dst.iter_mut().for_each(|v| *v *= norm);
    }
    out
}

pub fn avg_pool_backward(dy: &Tensor, factor: usize, in_hw: (usize, usize)) -> Tensor {
    let (c, ho, wo) = dy.shape();
    let (h, w) = in_hw;
    let norm = 1.0 / (factor * factor) as f64;
    let mut dx = Tensor::zeros(c, h, w);
    for k in 0..c {
        let src = dy.channel(k);
        let dst = dx.channel_mut(k);
        for y in 0..ho * factor {
            for xx in 0..wo * factor {
                dst[y * w + xx] = src[(y / factor) * wo + xx / factor] * norm;
            }
        }
    }
    dx
}

/// 2x2 max pooling; also returns the flat input index of each winner.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (c, h, w) = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, ho, wo);
    let mut arg = vec![0usize; c * ho * wo];
    let plane = h * w;
    for k in 0..c {
        let src = x.channel(k);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = oy * wo + ox;
                out.channel_mut(k)[o] = src[best];
                arg[k * ho * wo + o] = k * plane + best;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(dy: &Tensor, argmax: &[usize], in_shape: (usize, usize, usize)) -> Tensor {
    let (c, h, w) = in_shape;
    let mut dx = Tensor::zeros(c, h, w);
    let d = dx.data_mut();
    for (g, &i) in dy.data().iter().zip(argmax) {
        d[i] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (c, h, w) = x.shape();
    let mut out = Tensor::zeros(c, 2 * h, 2 * w);
    for k in 0..c {
        let src = x.channel(k);
        let dst = out.channel_mut(k);
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (c, h2, w2) = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(c, h, w);
    for k in 0..c {
        let src = dy.channel(k);
        let dst = dx.channel_mut(k);
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    dx
}
