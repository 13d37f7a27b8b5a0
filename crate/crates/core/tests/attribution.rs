use cxr_core::classifier::{BackboneConfig, StageModel};
use cxr_core::explain::{cam, cam_low_res, grad_cam_from_record, grad_cam_low_res, CamMode, HeatMap, Method};
use cxr_core::stage3::make_stage3_input;
use cxr_core::{Grid, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Grid {
    Grid::from_fn(n, n, |_, _| rng.random::<f64>())
}

#[test]
fn grad_cam_equals_relu_cam_for_gap_linear_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for draw in 0..100u64 {
        let model = StageModel::new(BackboneConfig {
            seed: draw,
            ..BackboneConfig::miniature(32)
        })
        .unwrap();
        let image = random_image(&mut rng, 32);
        let target = (draw % 2) as usize;
        let record = model.forward(&image).unwrap();
        let c = cam_low_res(&record, &model, target, CamMode::Spatial).unwrap();
        let g = grad_cam_low_res(&record, &model, target).unwrap();
        let cells = c.len() as f64;
        for (cv, gv) in c.data().iter().zip(g.data()) {
            // GAP spreads each weight over the cells, so alpha_k = w_k / cells.
            assert!(
                (cv.max(0.0) - gv * cells).abs() <= 1e-5,
                "draw {draw}: {cv} vs {}",
                gv * cells
            );
        }
        let relu_cam = HeatMap::from_low_res(&c.map(|v| v.max(0.0)), 32, 32, Stage::Covid, Method::Cam);
        let gc = grad_cam_from_record(&record, &model, target, Stage::Covid).unwrap();
        assert_eq!(relu_cam.flat, gc.flat);
        for (a, b) in relu_cam.pixels.data().iter().zip(gc.pixels.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}

#[test]
fn grad_cam_is_nonnegative_before_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for draw in 0..50u64 {
        let model = StageModel::new(BackboneConfig {
            seed: 1000 + draw,
            ..BackboneConfig::miniature(32)
        })
        .unwrap();
        let record = model.forward(&random_image(&mut rng, 32)).unwrap();
        for target in 0..2 {
            let g = grad_cam_low_res(&record, &model, target).unwrap();
            assert!(g.data().iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn one_hot_cam_peaks_in_its_block() {
    // A 32x32 CAM over a 512 px image: each cell covers a 16x16 block.
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let (i, j) = (rng.random_range(0..32), rng.random_range(0..32));
        let mut low = Grid::zeros(32, 32);
        low.set(i, j, rng.random_range(0.5..3.0));
        let map = HeatMap::from_low_res(&low, 512, 512, Stage::Pneumonia, Method::Cam);
        let (y, x) = map.pixels.argmax();
        assert_eq!((y / 16, x / 16), (i, j));
    }
}

#[test]
fn cam_heatmap_is_in_unit_range_at_input_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let model = StageModel::new(BackboneConfig::miniature(32)).unwrap();
    let record = model.forward(&random_image(&mut rng, 32)).unwrap();
    let h = cam(&record, &model, 1, Stage::Pneumonia).unwrap();
    assert_eq!(h.pixels.shape(), (32, 32));
    assert!(h.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn literal_reshape_needs_square_channel_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let model = StageModel::new(BackboneConfig::miniature(32)).unwrap();
    let record = model.forward(&random_image(&mut rng, 32)).unwrap();
    assert!(cam_low_res(&record, &model, 0, CamMode::LiteralReshape).is_err());
    let square = StageModel::new(BackboneConfig {
        feature_channels: 4,
        ..BackboneConfig::miniature(32)
    })
    .unwrap();
    let record = square.forward(&random_image(&mut rng, 32)).unwrap();
    assert_eq!(
        cam_low_res(&record, &square, 0, CamMode::LiteralReshape)
            .unwrap()
            .shape(),
        (2, 2)
    );
}

fn heatmap(pixels: Grid) -> HeatMap {
    HeatMap {
        pixels,
        stage: Stage::Pneumonia,
        method: Method::Cam,
        flat: false,
    }
}

#[test]
fn masking_never_brightens() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..100 {
        let x = random_image(&mut rng, 24);
        let low = random_image(&mut rng, 3);
        let h = HeatMap::from_low_res(&low, 24, 24, Stage::Pneumonia, Method::Cam);
        let out = make_stage3_input(&x, "s", &h).unwrap();
        for (a, b) in out.pixels.data().iter().zip(x.data()) {
            assert!(a <= b);
        }
    }
}

#[test]
fn masking_with_ones_and_zeros() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let x = random_image(&mut rng, 24);
    let same = make_stage3_input(&x, "s", &heatmap(Grid::filled(24, 24, 1.0))).unwrap();
    assert_eq!(same.pixels, x);
    let gone = make_stage3_input(&x, "s", &heatmap(Grid::zeros(24, 24))).unwrap();
    assert!(gone.pixels.data().iter().all(|&v| v == 0.0));
    assert!(make_stage3_input(&x, "s", &heatmap(Grid::zeros(12, 12))).is_err());
}
