//! Reference synthetic pilot: generate a corpus, train all three stages and
//! score them on the held-out split.
//!
//! Stage 2 is trained the incremental way: a teacher is fit on the original
//! partition only, then the student continues on the full corpus with the
//! distillation term. An optional second student without distillation gives
//! the comparison arm for the forgetting check.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cascade::ModelSet;
use crate::classifier::{BackboneConfig, StageModel};
use crate::data::corpus::{Label, LabeledSample, Partition, TrainingCorpus};
use crate::data::split::{split_dataset_by_label, DatasetSplit, SplitRatios};
use crate::data::synth::{generate_synthetic_corpus_with, ClassCounts, SyntheticSpec};
use crate::error::Result;
use crate::evaluator::{evaluate, roc_auc, EvalReport};
use crate::par::Execution;
use crate::segmenter::{mean_dice, train_segmenter_with, SegmenterConfig};
use crate::stage2::{self, relabel_binary, stage2_scores, train_stage2_with, TrainedClassifier};
use crate::stage3::{self, stage3_scores, train_stage3_with};
use crate::trainer::{EpochRecord, TrainConfig};
use crate::Stage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotConfig {
    pub synthetic: SyntheticSpec,
    pub split_seed: u64,
    pub segmenter: SegmenterConfig,
    pub segmenter_train: TrainConfig,
    pub backbone: BackboneConfig,
    /// Teacher fit on the original partition.
    pub stage2_pretrain: TrainConfig,
    /// Student fit on everything; its `lambda` weighs distillation.
    pub stage2_incremental: TrainConfig,
    pub stage3_train: TrainConfig,
}

impl PilotConfig {
    pub fn reference() -> Self {
        let seed = 7;
        let mut incremental = TrainConfig::new(Stage::Pneumonia, 8, 12, seed);
        incremental.lambda = 1.0;
        PilotConfig {
            synthetic: SyntheticSpec {
                counts: ClassCounts {
                    normal: 60,
                    covid: 40,
                    pneumonia: 40,
                },
                seed,
                ..SyntheticSpec::default()
            },
            split_seed: seed,
            segmenter: SegmenterConfig {
                seed,
                ..SegmenterConfig::default()
            },
            segmenter_train: TrainConfig::new(Stage::Segmentation, 12, 8, seed),
            backbone: BackboneConfig {
                seed,
                ..BackboneConfig::default()
            },
            stage2_pretrain: TrainConfig::new(Stage::Pneumonia, 6, 12, seed),
            stage2_incremental: incremental,
            stage3_train: TrainConfig::new(Stage::Covid, 8, 12, seed),
        }
    }

    /// Tiny 64-pixel setup for smoke tests; finishes in seconds and makes no
    /// accuracy promises.
    pub fn miniature() -> Self {
        let seed = 11;
        let mut incremental = TrainConfig::new(Stage::Pneumonia, 1, 4, seed);
        incremental.lambda = 1.0;
        PilotConfig {
            synthetic: SyntheticSpec {
                counts: ClassCounts {
                    normal: 12,
                    covid: 8,
                    pneumonia: 8,
                },
                image_size: 64,
                seed,
                ..SyntheticSpec::default()
            },
            split_seed: seed,
            segmenter: SegmenterConfig {
                depth: 2,
                base_channels: 2,
                input_scale: 2,
                seed,
                ..SegmenterConfig::default()
            },
            segmenter_train: TrainConfig::new(Stage::Segmentation, 1, 4, seed),
            backbone: BackboneConfig::miniature(64),
            stage2_pretrain: TrainConfig::new(Stage::Pneumonia, 1, 4, seed),
            stage2_incremental: incremental,
            stage3_train: TrainConfig::new(Stage::Covid, 1, 4, seed),
        }
    }
}

/// Original-partition classes 80/10/10, COVID 50/25/25.
pub fn split_ratios(label: Label) -> SplitRatios {
    match label {
        Label::Covid => SplitRatios::SMALL_COLLECTION,
        _ => SplitRatios::OPEN_DATA,
    }
}

pub fn pilot_split(corpus: &TrainingCorpus, seed: u64) -> Result<DatasetSplit> {
    split_dataset_by_label(corpus, split_ratios, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    /// Teacher's AUC on the original-partition validation samples.
    pub before: f64,
    pub after_with_distillation: f64,
    pub after_without_distillation: Option<f64>,
}

impl ForgettingReport {
    pub fn drop_with_distillation(&self) -> f64 {
        self.before - self.after_with_distillation
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotReport {
    pub stage1_test_dice: f64,
    pub stage2_test: EvalReport,
    pub stage3_test: EvalReport,
    pub forgetting: ForgettingReport,
    pub histories: Vec<(String, Vec<EpochRecord>)>,
    pub seconds: f64,
}

pub struct PilotRun {
    pub corpus: TrainingCorpus,
    pub split: DatasetSplit,
    pub models: ModelSet,
    pub teacher: StageModel,
    pub report: PilotReport,
}

fn original_auc(
    model: &StageModel,
    samples: &[&LabeledSample],
    segmenter: &crate::segmenter::SegmenterModel,
    exec: Execution,
) -> Result<f64> {
    let subset: Vec<&LabeledSample> = samples
        .iter()
        .copied()
        .filter(|s| s.partition == Partition::Original)
        .collect();
    let scores = stage2_scores(&subset, Some(segmenter), model, exec)?;
    let labels: Vec<bool> = subset.iter().map(|s| relabel_binary(s.label) == 1).collect();
    roc_auc(&scores, &labels)
}

/// Runs the whole pilot. `comparison_arm` also trains the stage-2 student
/// without distillation.
pub fn run_pilot(config: &PilotConfig, comparison_arm: bool, exec: Execution) -> Result<PilotRun> {
    let start = Instant::now();
    let corpus = generate_synthetic_corpus_with(&config.synthetic, exec)?;
    let split = pilot_split(&corpus, config.split_seed)?;
    let train = corpus.select(&split.train);
    let val = corpus.select(&split.val);
    let test = corpus.select(&split.test);
    let mut histories = Vec::new();

    let seg = train_segmenter_with(&train, &val, &config.segmenter, &config.segmenter_train, exec)?;
    histories.push(("stage1".to_string(), seg.history.clone()));
    let segmenter = seg.model;
    let stage1_test_dice = mean_dice(&segmenter, &test, exec)?;
    log::info!("stage 1 test dice {stage1_test_dice:.4}");

    let original = |s: &&LabeledSample| s.partition == Partition::Original;
    let train_o: Vec<&LabeledSample> = train.iter().copied().filter(original).collect();
    let val_o: Vec<&LabeledSample> = val.iter().copied().filter(original).collect();
    let teacher = train_stage2_with(
        &train_o,
        &val_o,
        Some(&segmenter),
        &config.backbone,
        &config.stage2_pretrain,
        None,
        exec,
    )?;
    histories.push(("stage2_pretrain".to_string(), teacher.history.clone()));
    let before = original_auc(&teacher.model, &val, &segmenter, exec)?;

    let student = |cfg: &TrainConfig| -> Result<TrainedClassifier> {
        train_stage2_with(
            &train,
            &val,
            Some(&segmenter),
            &config.backbone,
            cfg,
            Some(&teacher.model),
            exec,
        )
    };
    let distilled = student(&config.stage2_incremental)?;
    histories.push(("stage2_incremental".to_string(), distilled.history.clone()));
    let after_with = original_auc(&distilled.model, &val, &segmenter, exec)?;
    let after_without = if comparison_arm {
        let mut cfg = config.stage2_incremental.clone();
        cfg.lambda = 0.0;
        let plain = student(&cfg)?;
        histories.push(("stage2_incremental_lambda0".to_string(), plain.history.clone()));
        Some(original_auc(&plain.model, &val, &segmenter, exec)?)
    } else {
        None
    };
    let stage2_model = distilled.model;

    let s2_scores = stage2_scores(&test, Some(&segmenter), &stage2_model, exec)?;
    let s2_labels: Vec<bool> = test.iter().map(|s| relabel_binary(s.label) == 1).collect();
    let stage2_test = evaluate(&s2_scores, &s2_labels, stage2::DEFAULT_THRESHOLD)?;
    log::info!("stage 2 test auc {:.4}", stage2_test.auc);

    let pneumonia = |s: &&LabeledSample| s.label != Label::Normal;
    let train_p: Vec<&LabeledSample> = train.iter().copied().filter(pneumonia).collect();
    let val_p: Vec<&LabeledSample> = val.iter().copied().filter(pneumonia).collect();
    let test_p: Vec<&LabeledSample> = test.iter().copied().filter(pneumonia).collect();
    let s3 = train_stage3_with(
        &train_p,
        &val_p,
        &segmenter,
        &stage2_model,
        &config.backbone,
        &config.stage3_train,
        None,
        exec,
    )?;
    histories.push(("stage3".to_string(), s3.history.clone()));
    let s3_scores = stage3_scores(&test_p, &segmenter, &stage2_model, &s3.model, exec)?;
    let s3_labels: Vec<bool> = test_p.iter().map(|s| s.label == Label::Covid).collect();
    let stage3_test = evaluate(&s3_scores, &s3_labels, stage3::DEFAULT_THRESHOLD)?;
    log::info!("stage 3 test auc {:.4}", stage3_test.auc);

    let report = PilotReport {
        stage1_test_dice,
        stage2_test,
        stage3_test,
        forgetting: ForgettingReport {
            before,
            after_with_distillation: after_with,
            after_without_distillation: after_without,
        },
        histories,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(PilotRun {
        corpus,
        split,
        models: ModelSet {
            segmenter,
            stage2: stage2_model,
            stage3: s3.model,
        },
        teacher: teacher.model,
        report,
    })
}
