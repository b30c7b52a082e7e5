use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MultimodalSample;
use crate::error::{Error, Result};

/// Share of each source class held out for shift analysis.
pub const SOURCE_TEST_FRACTION: f64 = 0.2;

fn by_class(pool: &[MultimodalSample]) -> BTreeMap<usize, Vec<usize>> {
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.iter().enumerate() {
        classes.entry(s.label).or_default().push(i);
    }
    classes
}

/// Draws exactly `k` samples of every class present in `pool` for training;
/// everything else becomes the test set. Every class needs at least `k + 1`
/// samples so that its test portion is not empty.
pub fn sample_kshot(
    pool: &[MultimodalSample],
    k: usize,
    seed: u64,
) -> Result<(Vec<MultimodalSample>, Vec<MultimodalSample>)> {
    let classes = by_class(pool);
    if classes.is_empty() {
        return Err(crate::error::Error::EmptyDataset("k-shot pool is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(classes.len() * k);
    let mut test = Vec::with_capacity(pool.len().saturating_sub(classes.len() * k));
    for (class, mut idx) in classes {
        if idx.len() < k + 1 {
            return Err(Error::Sampling {
                class,
                available: idx.len(),
                required: k + 1,
            });
        }
        idx.shuffle(&mut rng);
        train.extend(idx[..k].iter().map(|&i| pool[i].clone()));
        test.extend(idx[k..].iter().map(|&i| pool[i].clone()));
    }
    Ok((train, test))
}

/// Seeded per-class holdout of `fraction` (at least one sample per class
/// with two or more members).
pub(crate) fn holdout(
    pool: &[MultimodalSample],
    fraction: f64,
    seed: u64,
) -> (Vec<MultimodalSample>, Vec<MultimodalSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (_, mut idx) in by_class(pool) {
        idx.shuffle(&mut rng);
        let n_test = if idx.len() < 2 {
            0
        } else {
            ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1)
        };
        test.extend(idx[..n_test].iter().map(|&i| pool[i].clone()));
        train.extend(idx[n_test..].iter().map(|&i| pool[i].clone()));
    }
    (train, test)
}
