use cxr_core::cascade::{gate, run_cascade, FinalClass, ModelSet, Thresholds};
use cxr_core::classifier::{BackboneConfig, StageModel};
use cxr_core::segmenter::{SegmenterConfig, SegmenterModel};
use cxr_core::Grid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The gating table written out case by case.
fn expected(p2: f64, p3: f64, t: &Thresholds) -> FinalClass {
    match (p2 >= t.stage2, p3 >= t.stage3) {
        (false, _) => FinalClass::Normal,
        (true, true) => FinalClass::Covid,
        (true, false) => FinalClass::NonCovidPneumonia,
    }
}

#[test]
fn gating_table_holds_for_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for i in 0..1000 {
        let t = if i % 2 == 0 {
            Thresholds::default()
        } else {
            Thresholds {
                stage2: rng.random(),
                stage3: rng.random(),
            }
        };
        // Every tenth pair sits exactly on a threshold.
        let p2 = if i % 10 == 0 { t.stage2 } else { rng.random() };
        let p3 = if i % 10 == 5 { t.stage3 } else { rng.random() };
        assert_eq!(gate(p2, Some(p3), &t).unwrap(), expected(p2, p3, &t), "p2={p2} p3={p3}");
    }
}

#[test]
fn positive_stage2_without_stage3_is_an_error() {
    assert!(gate(0.9, None, &Thresholds::default()).is_err());
    assert_eq!(gate(0.1, None, &Thresholds::default()).unwrap(), FinalClass::Normal);
}

#[test]
fn thresholds_outside_unit_interval_are_rejected() {
    assert!(Thresholds {
        stage2: 1.5,
        stage3: 0.5
    }
    .validate()
    .is_err());
    assert!(Thresholds {
        stage2: 0.5,
        stage3: -0.1
    }
    .validate()
    .is_err());
}

#[test]
fn final_class_names_round_trip() {
    for c in FinalClass::ALL {
        assert_eq!(c.as_str().parse::<FinalClass>().unwrap(), c);
        assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{}\"", c.as_str()));
    }
    assert!("pneumonia".parse::<FinalClass>().is_err());
}

fn tiny_models() -> ModelSet {
    ModelSet {
        segmenter: SegmenterModel::new(SegmenterConfig {
            depth: 2,
            base_channels: 2,
            input_scale: 2,
            ..SegmenterConfig::default()
        })
        .unwrap(),
        stage2: StageModel::new(BackboneConfig::miniature(32)).unwrap(),
        stage3: StageModel::new(BackboneConfig {
            seed: 4,
            ..BackboneConfig::miniature(32)
        })
        .unwrap(),
    }
}

#[test]
fn cascade_respects_gating_on_both_branches() {
    let models = tiny_models();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let raw = Grid::from_fn(40, 48, |_, _| rng.random::<f64>());
    for (stage2, stage3) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.5)] {
        let t = Thresholds { stage2, stage3 };
        let p = run_cascade(&raw, &models, &t).unwrap();
        assert!(p.is_consistent(&t));
        assert_eq!(p.image.shape(), (32, 32));
        if stage2 == 1.0 {
            assert_eq!(p.final_class, FinalClass::Normal);
            assert!(p.stage3.is_none() && p.stage3_input.is_none());
        } else {
            let s3 = p.stage3.as_ref().expect("stage 3 ran");
            assert_eq!(s3.gradcam.pixels.shape(), (32, 32));
            assert_eq!(s3.guided.raw.shape(), (32, 32));
            let want = if stage3 == 0.0 {
                FinalClass::Covid
            } else {
                FinalClass::NonCovidPneumonia
            };
            assert_eq!(p.final_class, want);
        }
    }
}

#[test]
fn cascade_is_deterministic() {
    let models = tiny_models();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let raw = Grid::from_fn(32, 32, |_, _| rng.random::<f64>());
    let t = Thresholds {
        stage2: 0.0,
        stage3: 0.5,
    };
    let a = run_cascade(&raw, &models, &t).unwrap();
    let b = run_cascade(&raw, &models, &t).unwrap();
    assert_eq!(a, b);
}

#[test]
fn constant_image_is_flagged() {
    let models = tiny_models();
    let p = run_cascade(&Grid::filled(32, 32, 0.3), &models, &Thresholds::default()).unwrap();
    assert!(p.flags.iter().any(|f| f == "constant_input"));
}

#[test]
fn mismatched_stage_sizes_are_rejected() {
    let mut models = tiny_models();
    models.stage3 = StageModel::new(BackboneConfig::miniature(64)).unwrap();
    assert!(models.validate().is_err());
}
