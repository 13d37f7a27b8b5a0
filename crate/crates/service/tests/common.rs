#![allow(dead_code)]

use std::path::Path;

use cxr_core::checkpoint::CheckpointBundle;
use cxr_core::classifier::{BackboneConfig, StageModel};
use cxr_core::data::image::encode_png8;
use cxr_core::segmenter::{SegmenterConfig, SegmenterModel};
use cxr_core::trainer::TrainConfig;
use cxr_core::{Grid, Stage};
use cxr_service::{RegistryEntry, ServiceConfig};

pub const SIZE: usize = 32;

/// Untrained 32 px checkpoints for all three stages under `dir`.
pub fn write_checkpoints(dir: &Path) {
    let seg = SegmenterModel::new(SegmenterConfig {
        depth: 2,
        base_channels: 2,
        input_scale: 2,
        ..SegmenterConfig::default()
    })
    .unwrap();
    CheckpointBundle::for_segmenter(&seg, Vec::new(), 1)
        .save(&dir.join("stage1"))
        .unwrap();
    for (stage, seed) in [(Stage::Pneumonia, 3), (Stage::Covid, 4)] {
        let m = StageModel::new(BackboneConfig {
            seed,
            ..BackboneConfig::miniature(SIZE)
        })
        .unwrap();
        CheckpointBundle::for_classifier(&m, &TrainConfig::new(stage, 0, 1, seed), Vec::new(), None)
            .save(&dir.join(format!("stage{}", stage.number())))
            .unwrap();
    }
}

pub fn registry(dir: &Path) -> Vec<RegistryEntry> {
    [Stage::Segmentation, Stage::Pneumonia, Stage::Covid]
        .into_iter()
        .map(|stage| RegistryEntry {
            stage,
            version: "v1".into(),
            path: dir.join(format!("stage{}", stage.number())),
            active: true,
        })
        .collect()
}

/// Config with checkpoints written, port 0 and a stage-2 threshold of 0 so
/// every upload reaches stage 3.
pub fn config(root: &Path) -> ServiceConfig {
    let models = root.join("models");
    write_checkpoints(&models);
    let mut cfg = ServiceConfig {
        data_dir: root.join("data"),
        port: 0,
        registry: registry(&models),
        ..ServiceConfig::default()
    };
    cfg.thresholds.stage2 = 0.0;
    cfg
}

pub fn png(seed: u64) -> Vec<u8> {
    let g = Grid::from_fn(SIZE, SIZE, |y, x| {
        ((y * 7 + x * 13 + seed as usize * 31) % 97) as f64 / 96.0
    });
    encode_png8(&g).unwrap()
}
