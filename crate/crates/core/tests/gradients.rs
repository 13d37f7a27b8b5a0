mod common;

use common::{central_diff, random_logits, rel_err};
use cxr_core::classifier::{BackboneConfig, StageModel};
use cxr_core::explain::input_gradient;
use cxr_core::trainer::{
    combined_loss, cross_entropy, cross_entropy_grad, distillation_grad, distillation_loss, sample_loss, LossTerm,
};
use cxr_core::Grid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-3;

#[test]
fn cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let k = rng.random_range(2..=5);
        let z = random_logits(&mut rng, k, 4.0);
        let t = rng.random_range(0..k);
        let g = cross_entropy_grad(&z, t);
        for i in 0..k {
            let fd = central_diff(
                |v| {
                    let mut zz = z.clone();
                    zz[i] = v;
                    cross_entropy(&zz, t).unwrap()
                },
                z[i],
                H,
            );
            assert!(rel_err(g[i], fd) <= TOL, "{} vs {fd}", g[i]);
        }
    }
}

#[test]
fn distillation_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let k = rng.random_range(2..=5);
        let s = random_logits(&mut rng, k, 4.0);
        let t = random_logits(&mut rng, k, 4.0);
        let temp = rng.random_range(0.5..4.0);
        let g = distillation_grad(&s, &t, temp);
        for i in 0..k {
            let fd = central_diff(
                |v| {
                    let mut ss = s.clone();
                    ss[i] = v;
                    distillation_loss(&ss, &t, temp).unwrap()
                },
                s[i],
                H,
            );
            assert!(rel_err(g[i], fd) <= TOL, "{} vs {fd}", g[i]);
        }
    }
}

fn miniature(seed: u64) -> StageModel {
    StageModel::new(BackboneConfig {
        seed,
        ..BackboneConfig::miniature(16)
    })
    .unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Grid {
    Grid::from_fn(n, n, |_, _| rng.random::<f64>())
}

/// Combined loss of a small batch as a function of the parameters, with
/// fixed teacher logits.
#[test]
fn combined_loss_parameter_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = miniature(5);
    let images: Vec<Grid> = (0..3).map(|_| random_image(&mut rng, 16)).collect();
    let teachers: Vec<Vec<f64>> = (0..3).map(|_| random_logits(&mut rng, 2, 2.0)).collect();
    let targets = [0usize, 1, 1];
    let original = [true, false, true];
    let (lambda, temp) = (0.7, 2.0);

    let loss_of = |m: &StageModel| {
        let logits: Vec<Vec<f64>> = images.iter().map(|x| m.logits(x).unwrap()).collect();
        let terms: Vec<LossTerm> = (0..3)
            .map(|i| LossTerm {
                logits: &logits[i],
                target: targets[i],
                original: original[i],
                teacher_logits: Some(&teachers[i]),
            })
            .collect();
        combined_loss(&terms, lambda, temp).unwrap()
    };

    let mut grads = model.params.zero_grads();
    for i in 0..3 {
        let record = model.forward(&images[i]).unwrap();
        let term = LossTerm {
            logits: &record.logits,
            target: targets[i],
            original: original[i],
            teacher_logits: Some(&teachers[i]),
        };
        let (_, mut dlogits) = sample_loss(&term, lambda, temp).unwrap();
        dlogits.iter_mut().for_each(|d| *d /= 3.0);
        grads.add_assign(&model.param_gradient(&record, &dlogits));
    }

    let mut checked = 0;
    for (pi, p) in model.params.params().iter().enumerate() {
        let step = p.values.len().div_ceil(5);
        for vi in (0..p.values.len()).step_by(step) {
            let fd = central_diff(
                |v| {
                    let mut m = model.clone();
                    m.params.params_mut()[pi].values[vi] = v;
                    loss_of(&m)
                },
                p.values[vi],
                H,
            );
            let an = grads.0[pi][vi];
            assert!(rel_err(an, fd) <= TOL, "{}[{vi}]: {an} vs {fd}", p.name);
            checked += 1;
        }
    }
    assert!(checked >= 20);
}

#[test]
fn target_logit_input_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..3 {
        let model = miniature(seed);
        let image = random_image(&mut rng, 16);
        for target in 0..2 {
            let g = input_gradient(&image, &model, target).unwrap();
            for _ in 0..20 {
                let (y, x) = (rng.random_range(0..16), rng.random_range(0..16));
                let fd = central_diff(
                    |v| {
                        let mut im = image.clone();
                        im.set(y, x, v);
                        model.logits(&im).unwrap()[target]
                    },
                    image.get(y, x),
                    H,
                );
                assert!(rel_err(g.get(y, x), fd) <= TOL, "({y},{x}): {} vs {fd}", g.get(y, x));
            }
        }
    }
}
