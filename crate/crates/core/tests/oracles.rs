mod common;

use common::{brute_auc, brute_dice};
use cxr_core::evaluator::roc_auc;
use cxr_core::segmenter::{dice, LungMask};
use cxr_core::{Error, Grid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    loop {
        let n = rng.random_range(2..=30);
        // Few distinct levels so ties are common.
        let levels = rng.random_range(2..=8);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

#[test]
fn auc_matches_pairwise_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..1000 {
        let (s, l) = random_instance(&mut rng);
        assert_eq!(roc_auc(&s, &l).unwrap(), brute_auc(&s, &l));
    }
}

#[test]
fn auc_is_invariant_to_monotone_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (s, l) = random_instance(&mut rng);
        let a = roc_auc(&s, &l).unwrap();
        let t1: Vec<f64> = s.iter().map(|v| (3.0 * v - 1.0).exp()).collect();
        let t2: Vec<f64> = s.iter().map(|v| v.powi(3) * 10.0 + 2.0).collect();
        assert_eq!(roc_auc(&t1, &l).unwrap(), a);
        assert_eq!(roc_auc(&t2, &l).unwrap(), a);
    }
}

#[test]
fn auc_needs_both_classes() {
    assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedAuc)));
    assert!(matches!(
        roc_auc(&[0.1, 0.2], &[false, false]),
        Err(Error::UndefinedAuc)
    ));
}

fn mask(bits: &[bool]) -> LungMask {
    LungMask::new(Grid::new(8, 8, bits.iter().map(|&b| b as u8 as f64).collect()).unwrap()).unwrap()
}

#[test]
fn dice_matches_pixel_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..500 {
        let pa = rng.random::<f64>();
        let pb = rng.random::<f64>();
        let a: Vec<bool> = (0..64).map(|_| rng.random_bool(pa)).collect();
        let b: Vec<bool> = (0..64).map(|_| rng.random_bool(pb)).collect();
        let got = dice(&mask(&a), &mask(&b)).unwrap();
        assert!((got - brute_dice(&a, &b)).abs() < 1e-12);
        assert_eq!(dice(&mask(&a), &mask(&a)).unwrap(), 1.0);
    }
}

#[test]
fn dice_disjoint_and_empty() {
    let top: Vec<bool> = (0..64).map(|i| i < 32).collect();
    let bottom: Vec<bool> = top.iter().map(|b| !b).collect();
    assert_eq!(dice(&mask(&top), &mask(&bottom)).unwrap(), 0.0);
    assert_eq!(dice(&mask(&[false; 64]), &mask(&[false; 64])).unwrap(), 1.0);
    assert_eq!(dice(&mask(&[false; 64]), &mask(&top)).unwrap(), 0.0);
}
