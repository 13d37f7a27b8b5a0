//! Stage 3: COVID-19 vs other pneumonia on the heatmap-attenuated image.

use crate::checkpoint::CheckpointBundle;
use crate::classifier::{softmax, BackboneConfig, StageModel};
use crate::data::corpus::{Label, LabeledSample, Partition};
use crate::error::{Error, Result};
use crate::explain::{grad_cam_from_record, guided_grad_cam_from_record, GuidedActivation, HeatMap, Method};
use crate::grid::Grid;
use crate::nn::Tensor;
use crate::par::{self, Execution};
use crate::segmenter::SegmenterModel;
use crate::stage2::{self, screen_stage2, validation_metrics, TrainedClassifier};
use crate::trainer::{fit, Example, TrainConfig};
use crate::Stage;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Index of the COVID (positive) class.
pub const POSITIVE: usize = 1;

/// Pixelwise product of an image with a stage-2 heatmap.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedInput {
    pub pixels: Grid,
    pub source_id: String,
    pub method: Method,
}

pub fn make_stage3_input(image: &Grid, source_id: &str, h2: &HeatMap) -> Result<MaskedInput> {
    Ok(MaskedInput {
        pixels: image.zip_with(&h2.pixels, |x, h| x * h)?,
        source_id: source_id.to_string(),
        method: h2.method,
    })
}

/// COVID is 1, other pneumonia 0; normal samples are rejected.
pub fn relabel_stage3(sample: &LabeledSample) -> Result<usize> {
    match sample.label {
        Label::Covid => Ok(1),
        Label::NonCovidPneumonia => Ok(0),
        Label::Normal => Err(Error::NormalInStage3(sample.source_id().to_string())),
    }
}

/// Lung-masked image times the positive-class stage-2 CAM.
pub fn stage3_input(
    image: &Grid,
    source_id: &str,
    segmenter: &SegmenterModel,
    stage2_model: &StageModel,
) -> Result<MaskedInput> {
    let s2 = screen_stage2(image, segmenter, stage2_model, stage2::DEFAULT_THRESHOLD)?;
    make_stage3_input(&s2.masked_image, source_id, &s2.heatmap)
}

pub fn stage3_examples(
    samples: &[&LabeledSample],
    segmenter: &SegmenterModel,
    stage2_model: &StageModel,
    exec: Execution,
) -> Result<(Vec<Example>, Vec<String>)> {
    for s in samples {
        relabel_stage3(s)?;
    }
    let mut order = samples.to_vec();
    order.sort_by(|a, b| a.source_id().cmp(b.source_id()));
    let labels: Vec<Label> = [Label::Covid, Label::NonCovidPneumonia]
        .into_iter()
        .filter(|l| order.iter().any(|s| s.label == *l))
        .collect();
    let examples = par::map_slice(exec, &order, |s| -> Result<Example> {
        let x = stage3_input(&s.image.pixels, s.source_id(), segmenter, stage2_model)?;
        Ok(Example {
            source_id: s.source_id().to_string(),
            input: Tensor::from_grid(&x.pixels),
            target: relabel_stage3(s)?,
            group: labels.iter().position(|l| *l == s.label).expect("label present"),
            original: s.partition == Partition::Original,
        })
    });
    Ok((
        examples.into_iter().collect::<Result<Vec<_>>>()?,
        labels.iter().map(|l| l.to_string()).collect(),
    ))
}

/// Trains stage 3 on pneumonia samples; stages 1 and 2 are only read.
pub fn train_stage3(
    train: &[&LabeledSample],
    val: &[&LabeledSample],
    segmenter: &SegmenterModel,
    stage2_model: &StageModel,
    backbone: &BackboneConfig,
    config: &TrainConfig,
    teacher: Option<&StageModel>,
) -> Result<TrainedClassifier> {
    train_stage3_with(
        train,
        val,
        segmenter,
        stage2_model,
        backbone,
        config,
        teacher,
        Execution::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn train_stage3_with(
    train: &[&LabeledSample],
    val: &[&LabeledSample],
    segmenter: &SegmenterModel,
    stage2_model: &StageModel,
    backbone: &BackboneConfig,
    config: &TrainConfig,
    teacher: Option<&StageModel>,
    exec: Execution,
) -> Result<TrainedClassifier> {
    if config.stage != Stage::Covid {
        return Err(Error::InvalidConfig(format!(
            "stage-3 training got stage {}",
            config.stage
        )));
    }
    for s in train.iter().chain(val) {
        relabel_stage3(s)?;
    }
    let initial = match teacher {
        Some(t) => t.clone(),
        None => StageModel::new(backbone.clone())?,
    };
    if config.epochs > 0 && train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (examples, names, val_examples) = if config.epochs > 0 {
        let (e, n) = stage3_examples(train, segmenter, stage2_model, exec)?;
        let (v, _) = stage3_examples(val, segmenter, stage2_model, exec)?;
        (e, n, v)
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    let out = fit(&initial, &examples, &names, config, teacher, exec, |m| {
        validation_metrics(m, &val_examples, exec)
    })?;
    let bundle = CheckpointBundle::for_classifier(&out.model, config, out.history.clone(), teacher);
    Ok(TrainedClassifier {
        model: out.model,
        history: out.history,
        bundle,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage3Output {
    pub prob_covid: f64,
    pub decision: bool,
    pub threshold: f64,
    pub gradcam: HeatMap,
    pub guided: GuidedActivation,
}

pub fn screen_stage3(masked: &MaskedInput, model: &StageModel, threshold: f64) -> Result<Stage3Output> {
    let record = model.forward(&masked.pixels)?;
    let prob_covid = softmax(&record.logits)[POSITIVE];
    let gradcam = grad_cam_from_record(&record, model, POSITIVE, Stage::Covid)?;
    let guided = guided_grad_cam_from_record(&record, model, POSITIVE)?;
    Ok(Stage3Output {
        prob_covid,
        decision: prob_covid >= threshold,
        threshold,
        gradcam,
        guided,
    })
}

/// COVID probabilities for pneumonia samples, in input order.
pub fn stage3_scores(
    samples: &[&LabeledSample],
    segmenter: &SegmenterModel,
    stage2_model: &StageModel,
    model: &StageModel,
    exec: Execution,
) -> Result<Vec<f64>> {
    par::map_slice(exec, samples, |s| -> Result<f64> {
        let x = stage3_input(&s.image.pixels, s.source_id(), segmenter, stage2_model)?;
        Ok(model.predict_proba(&x.pixels)?[POSITIVE])
    })
    .into_iter()
    .collect()
}
