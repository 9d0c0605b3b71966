//! QE and parallel-corpus ingestion, tokenization, encoding and splitting.

mod sequence;
mod tsv;
mod vocab;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use sequence::{
    encode_pair_mono, encode_pair_siamese, pad_batch, truncate_longest_first, TokenSequence, MAX_SEQUENCE_LEN,
};
pub use tsv::{
    load_parallel_corpus, load_qe_dataset, write_qe_dataset, ColumnMap, ParallelCorpus, ParallelPair, QEPair,
};
pub use vocab::{build_vocab, tokenize, Vocab};

use crate::error::{Error, Result};

/// Standardizes to zero mean and unit population standard deviation.
pub fn zscore_standardize(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(Error::TooFew(format!("z-score needs at least 2 values, got {}", scores.len())));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let std = var.sqrt();
    Ok(scores.iter().map(|s| (s - mean) / std).collect())
}

/// Seeded disjoint hold-out split. Both sides keep input order.
pub fn split_train_eval<T: Clone>(data: &[T], eval_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("eval_fraction must lie in (0, 1), got {eval_fraction}")));
    }
    let n_eval = (eval_fraction * data.len() as f64).round() as usize;
    if n_eval == 0 || n_eval >= data.len() {
        return Err(Error::TooFew(format!(
            "split of {} rows at fraction {eval_fraction} leaves an empty side",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_eval = vec![false; data.len()];
    for &i in &order[..n_eval] {
        is_eval[i] = true;
    }
    let (mut train, mut eval) = (Vec::with_capacity(data.len() - n_eval), Vec::with_capacity(n_eval));
    for (item, e) in data.iter().zip(is_eval) {
        if e {
            eval.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, eval))
}
