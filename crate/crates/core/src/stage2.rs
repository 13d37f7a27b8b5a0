//! Stage 2: normal vs pneumonia on lung-masked images.

use std::collections::BTreeMap;

use crate::checkpoint::CheckpointBundle;
use crate::classifier::{softmax, BackboneConfig, StageModel};
use crate::data::corpus::{Label, LabeledSample, Partition};
use crate::error::{Error, Result};
use crate::evaluator::roc_auc;
use crate::explain::{cam, HeatMap};
use crate::grid::Grid;
use crate::nn::Tensor;
use crate::par::{self, Execution};
use crate::segmenter::{mask_grid, predict_mask, MaskPrediction, SegmenterModel};
use crate::trainer::{fit, EpochRecord, Example, TrainConfig};
use crate::Stage;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Index of the pneumonia (positive) class.
pub const POSITIVE: usize = 1;

/// Normal is 0; COVID and other pneumonia are 1.
pub fn relabel_binary(label: Label) -> usize {
    match label {
        Label::Normal => 0,
        Label::Covid | Label::NonCovidPneumonia => 1,
    }
}

/// Image as stage 2 sees it: lung-masked when a segmenter is given.
pub fn stage2_input(image: &Grid, segmenter: Option<&SegmenterModel>) -> Result<(Grid, Option<MaskPrediction>)> {
    match segmenter {
        Some(seg) => {
            let mask = predict_mask(image, seg)?;
            Ok((mask_grid(image, &mask.mask)?, Some(mask)))
        }
        None => Ok((image.clone(), None)),
    }
}

fn group_names(samples: &[&LabeledSample]) -> (Vec<String>, Vec<Label>) {
    let present: Vec<Label> = Label::ALL
        .into_iter()
        .filter(|l| samples.iter().any(|s| s.label == *l))
        .collect();
    (present.iter().map(|l| l.to_string()).collect(), present)
}

/// Stage-2 examples in canonical (source id) order, balanced by label.
pub fn stage2_examples(
    samples: &[&LabeledSample],
    segmenter: Option<&SegmenterModel>,
    exec: Execution,
) -> Result<(Vec<Example>, Vec<String>)> {
    let mut order = samples.to_vec();
    order.sort_by(|a, b| a.source_id().cmp(b.source_id()));
    let (names, labels) = group_names(&order);
    let examples = par::map_slice(exec, &order, |s| -> Result<Example> {
        let (input, _) = stage2_input(&s.image.pixels, segmenter)?;
        Ok(Example {
            source_id: s.source_id().to_string(),
            input: Tensor::from_grid(&input),
            target: relabel_binary(s.label),
            group: labels.iter().position(|l| *l == s.label).expect("label present"),
            original: s.partition == Partition::Original,
        })
    });
    Ok((examples.into_iter().collect::<Result<Vec<_>>>()?, names))
}

/// Positive-class probabilities for prepared examples.
pub fn example_scores(model: &StageModel, examples: &[Example], exec: Execution) -> Vec<f64> {
    par::map_slice(exec, examples, |e| {
        softmax(&model.net.forward(&model.params, &e.input).logits)[POSITIVE]
    })
}

/// Validation metrics recorded after each epoch: AUC on all validation
/// examples and on the original-partition subset, when defined.
pub(crate) fn validation_metrics(model: &StageModel, val: &[Example], exec: Execution) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    if val.is_empty() {
        return m;
    }
    let scores = example_scores(model, val, exec);
    let labels: Vec<bool> = val.iter().map(|e| e.target == POSITIVE).collect();
    if let Ok(auc) = roc_auc(&scores, &labels) {
        m.insert("val_auc".into(), auc);
    }
    let (s, l): (Vec<f64>, Vec<bool>) = val
        .iter()
        .zip(scores.iter().zip(&labels))
        .filter(|(e, _)| e.original)
        .map(|(_, (s, l))| (*s, *l))
        .unzip();
    if let Ok(auc) = roc_auc(&s, &l) {
        m.insert("val_auc_original".into(), auc);
    }
    m
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub model: StageModel,
    pub history: Vec<EpochRecord>,
    pub bundle: CheckpointBundle,
}

/// Trains stage 2. With a teacher the student starts from the teacher's
/// parameters and the distillation term covers original-partition samples.
/// `segmenter: None` trains on unmasked images (ablation arm).
pub fn train_stage2(
    train: &[&LabeledSample],
    val: &[&LabeledSample],
    segmenter: Option<&SegmenterModel>,
    backbone: &BackboneConfig,
    config: &TrainConfig,
    teacher: Option<&StageModel>,
) -> Result<TrainedClassifier> {
    train_stage2_with(train, val, segmenter, backbone, config, teacher, Execution::default())
}

#[allow(clippy::too_many_arguments)]
pub fn train_stage2_with(
    train: &[&LabeledSample],
    val: &[&LabeledSample],
    segmenter: Option<&SegmenterModel>,
    backbone: &BackboneConfig,
    config: &TrainConfig,
    teacher: Option<&StageModel>,
    exec: Execution,
) -> Result<TrainedClassifier> {
    if config.stage != Stage::Pneumonia {
        return Err(Error::InvalidConfig(format!(
            "stage-2 training got stage {}",
            config.stage
        )));
    }
    let initial = match teacher {
        Some(t) => t.clone(),
        None => StageModel::new(backbone.clone())?,
    };
    if config.epochs > 0 && train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (examples, names) = if config.epochs > 0 {
        stage2_examples(train, segmenter, exec)?
    } else {
        (Vec::new(), Vec::new())
    };
    let (val_examples, _) = if config.epochs > 0 {
        stage2_examples(val, segmenter, exec)?
    } else {
        (Vec::new(), Vec::new())
    };
    let out = fit(&initial, &examples, &names, config, teacher, exec, |m| {
        validation_metrics(m, &val_examples, exec)
    })?;
    let mut bundle = CheckpointBundle::for_classifier(&out.model, config, out.history.clone(), teacher);
    bundle.manifest.lung_mask = segmenter.is_some();
    Ok(TrainedClassifier {
        model: out.model,
        history: out.history,
        bundle,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Output {
    pub prob_pneumonia: f64,
    pub decision: bool,
    pub threshold: f64,
    /// Positive-class CAM, produced for negatives too.
    pub heatmap: HeatMap,
    pub mask: MaskPrediction,
    /// Lung-masked input the classifier saw.
    pub masked_image: Grid,
}

pub fn screen_stage2(
    image: &Grid,
    segmenter: &SegmenterModel,
    model: &StageModel,
    threshold: f64,
) -> Result<Stage2Output> {
    let (masked_image, mask) = stage2_input(image, Some(segmenter))?;
    let record = model.forward(&masked_image)?;
    let prob_pneumonia = softmax(&record.logits)[POSITIVE];
    let heatmap = cam(&record, model, POSITIVE, Stage::Pneumonia)?;
    Ok(Stage2Output {
        prob_pneumonia,
        decision: prob_pneumonia >= threshold,
        threshold,
        heatmap,
        mask: mask.expect("segmenter given"),
        masked_image,
    })
}

/// Positive-class probabilities for labelled samples, in input order.
pub fn stage2_scores(
    samples: &[&LabeledSample],
    segmenter: Option<&SegmenterModel>,
    model: &StageModel,
    exec: Execution,
) -> Result<Vec<f64>> {
    par::map_slice(exec, samples, |s| -> Result<f64> {
        let (input, _) = stage2_input(&s.image.pixels, segmenter)?;
        Ok(model.predict_proba(&input)?[POSITIVE])
    })
    .into_iter()
    .collect()
}
