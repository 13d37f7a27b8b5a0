use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Label, TrainingCorpus};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const OPEN_DATA: SplitRatios = SplitRatios {
        train: 0.8,
        val: 0.1,
        test: 0.1,
    };
    /// Used for small collections such as the COVID-19 images.
    pub const SMALL_COLLECTION: SplitRatios = SplitRatios {
        train: 0.5,
        val: 0.25,
        test: 0.25,
    };

    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = SplitRatios { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&p| p <= 0.0 || !p.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "split ratios must be positive: {parts:?}"
            )));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split ratios must sum to 1: {parts:?}")));
        }
        Ok(())
    }

    /// Bin sizes for `n` items: floor each share, then hand the leftover items
    /// to the bins with the largest fractional parts (earlier bin on ties).
    pub fn allocate(&self, n: usize) -> [usize; 3] {
        let shares = [self.train, self.val, self.test].map(|r| r * n as f64);
        let mut counts = shares.map(|s| (s + 1e-9).floor() as usize);
        let mut left = n - counts.iter().sum::<usize>().min(n);
        let mut order = [0usize, 1, 2];
        let frac = shares.map(|s| ((s - (s + 1e-9).floor()) * 1e9).round());
        order.sort_by(|&a, &b| frac[b].partial_cmp(&frac[a]).unwrap().then(a.cmp(&b)));
        let mut i = 0;
        while left > 0 {
            counts[order[i % 3]] += 1;
            left -= 1;
            i += 1;
        }
        counts
    }
}

/// Disjoint index lists into a [`TrainingCorpus`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl DatasetSplit {
    pub fn part(&self, name: &str) -> Option<&[usize]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Stratified split with one ratio triple for every class.
pub fn split_dataset(corpus: &TrainingCorpus, ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    split_dataset_by_label(corpus, |_| ratios, seed)
}

/// Stratified split: each label is shuffled under its own seed stream and cut
/// according to `ratios_for(label)`.
pub fn split_dataset_by_label(
    corpus: &TrainingCorpus,
    ratios_for: impl Fn(Label) -> SplitRatios,
    seed: u64,
) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    for label in Label::ALL {
        let ratios = ratios_for(label);
        ratios.validate()?;
        let mut ids = corpus.indices_by_label(label);
        if ids.is_empty() {
            continue;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(label.code() as u64 + 1)));
        ids.shuffle(&mut rng);
        let mut counts = ratios.allocate(ids.len());
        if ids.len() < 3 {
            split.warnings.push(format!(
                "class {label} has {} sample(s), fewer than the 3 split bins",
                ids.len()
            ));
        }
        if counts[0] == 0 {
            let n = ids.len() as f64;
            let excess = |k: usize| counts[k] as f64 - [ratios.val, ratios.test][k - 1] * n;
            let donor = if excess(1) >= excess(2) { 1 } else { 2 };
            counts[donor] -= 1;
            counts[0] += 1;
        }
        let (train, rest) = ids.split_at(counts[0]);
        let (val, test) = rest.split_at(counts[1]);
        split.train.extend_from_slice(train);
        split.val.extend_from_slice(val);
        split.test.extend_from_slice(test);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    for w in &split.warnings {
        log::warn!("{w}");
    }
    Ok(split)
}
