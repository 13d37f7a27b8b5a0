//! Attribution maps: CAM, GradCAM, guided backpropagation and their product.

use std::io::Cursor;

use base64::Engine;
use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::classifier::{ForwardRecord, StageModel};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::ReluBackward;
use crate::Stage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Cam,
    GradCam,
}

/// How the low-resolution class activation map is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamMode {
    /// Head-weighted sum of the pre-pooling feature maps.
    #[default]
    Spatial,
    /// Weighted pooled vector reshaped into a square. Needs a square channel
    /// count and carries no localization; kept for comparison.
    LiteralReshape,
}

/// Heatmap in `[0, 1]` at the classifier's input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    pub pixels: Grid,
    pub stage: Stage,
    pub method: Method,
    /// The map was constant before normalization and was replaced by ones.
    pub flat: bool,
}

impl HeatMap {
    /// Bilinear upsampling to `height x width` followed by min-max scaling.
    pub fn from_low_res(low: &Grid, height: usize, width: usize, stage: Stage, method: Method) -> HeatMap {
        let up = low.resize_bilinear(height, width);
        match up.normalized() {
            Some(pixels) => HeatMap {
                pixels,
                stage,
                method,
                flat: false,
            },
            None => HeatMap {
                pixels: Grid::filled(height, width, 1.0),
                stage,
                method,
                flat: true,
            },
        }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        unit_grid_png(&self.pixels)
    }

    pub fn to_base64_png(&self) -> Result<String> {
        Ok(base64::engine::general_purpose::STANDARD.encode(self.to_png()?))
    }
}

/// Signed guided attribution plus a copy scaled into `[-1, 1]` by its largest
/// magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidedActivation {
    pub raw: Grid,
    pub display: Grid,
}

impl GuidedActivation {
    pub fn new(raw: Grid) -> Self {
        let peak = raw.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let display = if peak > 0.0 {
            raw.map(|v| v / peak)
        } else {
            Grid::zeros(raw.height(), raw.width())
        };
        GuidedActivation { raw, display }
    }

    /// Grayscale PNG with zero at mid-gray.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        unit_grid_png(&self.display.map(|v| 0.5 * (v + 1.0)))
    }

    pub fn to_base64_png(&self) -> Result<String> {
        Ok(base64::engine::general_purpose::STANDARD.encode(self.to_png()?))
    }
}

fn unit_grid_png(g: &Grid) -> Result<Vec<u8>> {
    let img = GrayImage::from_fn(g.width() as u32, g.height() as u32, |x, y| {
        Luma([to_u8(g.get(y as usize, x as usize))])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Low-resolution class activation map before upsampling.
pub fn cam_low_res(record: &ForwardRecord, model: &StageModel, target: usize, mode: CamMode) -> Result<Grid> {
    let w = model.class_weights(target)?;
    let a = &record.features;
    match mode {
        CamMode::Spatial => {
            let mut out = vec![0.0; a.plane()];
            for (k, &wk) in w.iter().enumerate() {
                for (o, &v) in out.iter_mut().zip(a.channel(k)) {
                    *o += wk * v;
                }
            }
            Grid::new(a.height(), a.width(), out)
        }
        CamMode::LiteralReshape => {
            let k = w.len();
            let side = (k as f64).sqrt().round() as usize;
            if side * side != k {
                return Err(Error::InvalidConfig(format!(
                    "literal reshape needs a square channel count, got {k}"
                )));
            }
            let v = w.iter().zip(&record.pooled).map(|(w, p)| w * p).collect();
            Grid::new(side, side, v)
        }
    }
}

pub fn cam(record: &ForwardRecord, model: &StageModel, target: usize, stage: Stage) -> Result<HeatMap> {
    cam_with_mode(record, model, target, stage, CamMode::Spatial)
}

pub fn cam_with_mode(
    record: &ForwardRecord,
    model: &StageModel,
    target: usize,
    stage: Stage,
    mode: CamMode,
) -> Result<HeatMap> {
    let low = cam_low_res(record, model, target, mode)?;
    let n = model.config.input_size;
    Ok(HeatMap::from_low_res(&low, n, n, stage, Method::Cam))
}

/// Channel weights `α_k`: spatial means of `d logit[target] / d A[k]`.
pub fn grad_cam_weights(record: &ForwardRecord, model: &StageModel, target: usize) -> Result<Vec<f64>> {
    Ok(model.feature_gradient(record, target)?.channel_means())
}

/// `ReLU(Σ α_k A[k])` at feature resolution.
pub fn grad_cam_low_res(record: &ForwardRecord, model: &StageModel, target: usize) -> Result<Grid> {
    let alpha = grad_cam_weights(record, model, target)?;
    let a = &record.features;
    let mut out = vec![0.0; a.plane()];
    for (k, &ak) in alpha.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(a.channel(k)) {
            *o += ak * v;
        }
    }
    Grid::new(a.height(), a.width(), out.into_iter().map(|v| v.max(0.0)).collect())
}

pub fn grad_cam(image: &Grid, model: &StageModel, target: usize, stage: Stage) -> Result<HeatMap> {
    let record = model.forward(image)?;
    grad_cam_from_record(&record, model, target, stage)
}

pub fn grad_cam_from_record(
    record: &ForwardRecord,
    model: &StageModel,
    target: usize,
    stage: Stage,
) -> Result<HeatMap> {
    let low = grad_cam_low_res(record, model, target)?;
    let n = model.config.input_size;
    let map = HeatMap::from_low_res(&low, n, n, stage, Method::GradCam);
    if map.flat {
        log::warn!("flat_attribution: GradCAM map is constant");
    }
    Ok(map)
}

fn onehot(model: &StageModel, target: usize) -> Result<Vec<f64>> {
    model.check_target(target)?;
    let mut d = vec![0.0; model.num_classes()];
    d[target] = 1.0;
    Ok(d)
}

pub fn guided_backprop(image: &Grid, model: &StageModel, target: usize) -> Result<GuidedActivation> {
    let record = model.forward(image)?;
    guided_backprop_from_record(&record, model, target)
}

pub fn guided_backprop_from_record(
    record: &ForwardRecord,
    model: &StageModel,
    target: usize,
) -> Result<GuidedActivation> {
    let d = onehot(model, target)?;
    Ok(GuidedActivation::new(model.input_gradient(
        record,
        &d,
        ReluBackward::Guided,
    )))
}

/// Plain input gradient of the target logit.
pub fn input_gradient(image: &Grid, model: &StageModel, target: usize) -> Result<Grid> {
    let record = model.forward(image)?;
    Ok(model.input_gradient(&record, &onehot(model, target)?, ReluBackward::Standard))
}

/// Elementwise product of a guided map with an upsampled GradCAM map.
pub fn combine_guided(guided: &Grid, grad_cam_map: &Grid) -> Result<GuidedActivation> {
    Ok(GuidedActivation::new(guided.zip_with(grad_cam_map, |g, c| g * c)?))
}

pub fn guided_grad_cam(image: &Grid, model: &StageModel, target: usize) -> Result<GuidedActivation> {
    let record = model.forward(image)?;
    guided_grad_cam_from_record(&record, model, target)
}

pub fn guided_grad_cam_from_record(
    record: &ForwardRecord,
    model: &StageModel,
    target: usize,
) -> Result<GuidedActivation> {
    let guided = guided_backprop_from_record(record, model, target)?;
    let low = grad_cam_low_res(record, model, target)?;
    let up = low.resize_bilinear(guided.raw.height(), guided.raw.width());
    combine_guided(&guided.raw, &up)
}

/// Colormaps available for overlays.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    #[default]
    Jet,
    Gray,
}

impl Colormap {
    pub fn rgb(self, v: f64) -> [f64; 3] {
        let v = v.clamp(0.0, 1.0);
        match self {
            Colormap::Gray => [v, v, v],
            Colormap::Jet => {
                let f = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
                [f(3.0), f(2.0), f(1.0)]
            }
        }
    }
}

/// Alpha-blends a colormapped heatmap over a grayscale image, as RGB PNG.
pub fn overlay_png(base: &Grid, heat: &HeatMap, colormap: Colormap, alpha: f64) -> Result<Vec<u8>> {
    base.ensure_same_shape(&heat.pixels)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("overlay alpha {alpha} outside [0, 1]")));
    }
    let img = RgbImage::from_fn(base.width() as u32, base.height() as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        let g = base.get(y, x);
        let c = colormap.rgb(heat.pixels.get(y, x));
        Rgb(c.map(|ch| to_u8((1.0 - alpha) * g + alpha * ch)))
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}
