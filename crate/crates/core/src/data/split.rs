//! Procedure-level train/validation partition.

use std::collections::BTreeSet;

use super::Corpus;
use crate::error::{Error, Result};
use crate::rng::{derive_seed_str, RngStream};

/// Shuffles the distinct procedure ids with `seed` and assigns the first
/// `round(fraction · n)` (clamped to `[1, n − 1]`) to training.
pub fn split_procedures(
    ids: &[u32],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<u32>, Vec<u32>)> {
    let distinct: BTreeSet<u32> = ids.iter().copied().collect();
    let n = distinct.len();
    if n < 2 {
        return Err(Error::Contract(format!(
            "a procedure split needs at least 2 procedures, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Param(format!(
            "train fraction must lie in [0, 1], got {train_fraction}"
        )));
    }
    let mut order: Vec<u32> = distinct.into_iter().collect();
    RngStream::new(derive_seed_str(seed, "split")).shuffle(&mut order);
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Sample indices of the train and validation partitions.
pub fn split_by_procedure(
    corpus: &Corpus,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let ids: Vec<u32> = corpus.samples.iter().map(|s| s.procedure_id).collect();
    let (train, _) = split_procedures(&ids, train_fraction, seed)?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, s) in corpus.samples.iter().enumerate() {
        if train.binary_search(&s.procedure_id).is_ok() {
            a.push(i);
        } else {
            b.push(i);
        }
    }
    Ok((a, b))
}
