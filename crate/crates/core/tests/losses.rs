mod common;

use common::{naive_cross_entropy, random_logits};
use cxr_core::trainer::{combined_loss, cross_entropy, distillation_loss, LossTerm};
use cxr_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Sample {
    logits: Vec<f64>,
    teacher: Vec<f64>,
    target: usize,
    original: bool,
}

fn random_batch(rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let k = rng.random_range(2..=5);
    let n = rng.random_range(1..=16);
    (0..n)
        .map(|_| Sample {
            logits: random_logits(rng, k, 6.0),
            teacher: random_logits(rng, k, 6.0),
            target: rng.random_range(0..k),
            original: rng.random_bool(0.5),
        })
        .collect()
}

fn terms(batch: &[Sample]) -> Vec<LossTerm<'_>> {
    batch
        .iter()
        .map(|s| LossTerm {
            logits: &s.logits,
            target: s.target,
            original: s.original,
            teacher_logits: Some(&s.teacher),
        })
        .collect()
}

#[test]
fn lambda_zero_reduces_to_mean_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let batch = random_batch(&mut rng);
        let t = rng.random_range(0.5..4.0);
        let got = combined_loss(&terms(&batch), 0.0, t).unwrap();
        let want = batch
            .iter()
            .map(|s| naive_cross_entropy(&s.logits, s.target))
            .sum::<f64>()
            / batch.len() as f64;
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }
}

#[test]
fn combined_loss_is_monotone_in_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..50 {
        let batch = random_batch(&mut rng);
        let mut prev = f64::NEG_INFINITY;
        for lambda in [0.0, 0.1, 0.5, 1.0, 3.0] {
            let l = combined_loss(&terms(&batch), lambda, 1.0).unwrap();
            assert!(l >= prev);
            prev = l;
        }
    }
}

#[test]
fn batch_without_original_samples_ignores_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut batch = random_batch(&mut rng);
    for s in &mut batch {
        s.original = false;
    }
    let a = combined_loss(&terms(&batch), 0.0, 1.0).unwrap();
    let b = combined_loss(&terms(&batch), 7.0, 1.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn distillation_of_identical_logits_is_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    for _ in 0..100 {
        let s = random_logits(&mut rng, 3, 10.0);
        assert_eq!(distillation_loss(&s, &s, rng.random_range(0.5..5.0)).unwrap(), 0.0);
    }
}

#[test]
fn distillation_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    for _ in 0..1000 {
        let k = rng.random_range(2..=6);
        let s = random_logits(&mut rng, k, 8.0);
        let t = random_logits(&mut rng, k, 8.0);
        assert!(distillation_loss(&s, &t, rng.random_range(0.5..5.0)).unwrap() >= 0.0);
    }
}

#[test]
fn distillation_hand_value() {
    let kl = distillation_loss(&[0.0, 3f64.ln()], &[0.0, 0.0], 1.0).unwrap();
    assert!((kl - 0.143841).abs() < 1e-6, "{kl}");
}

#[test]
fn distillation_arity_mismatch_is_an_error() {
    assert!(matches!(
        distillation_loss(&[0.0, 1.0], &[0.0, 1.0, 2.0], 1.0),
        Err(Error::TeacherArity { .. })
    ));
}

#[test]
fn cross_entropy_matches_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    for _ in 0..200 {
        let k = rng.random_range(2..=5);
        let z = random_logits(&mut rng, k, 5.0);
        let t = rng.random_range(0..k);
        assert!((cross_entropy(&z, t).unwrap() - naive_cross_entropy(&z, t)).abs() < 1e-12);
    }
}
