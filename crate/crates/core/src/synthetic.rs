//! Synthetic corruption task for exercising the training pipeline end to end.
//!
//! Each pair's translation is a copy of its source with a fraction of tokens
//! swapped for random vocabulary words; the gold score is the standardized
//! negative corrupted fraction. Sources draw from a small "common" slice of
//! the word list while replacements come from the whole list.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{zscore_standardize, ParallelPair, QEPair};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_pairs: usize,
    /// Size of the full word list.
    pub n_words: usize,
    /// Sources use only the first `n_common` words.
    pub n_common: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_corruption: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { n_pairs: 2500, n_words: 200, n_common: 40, min_len: 6, max_len: 16, max_corruption: 0.9, seed: 2024 }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_common == 0 || self.n_common > self.n_words {
            return bad("n_common must lie in 1..=n_words");
        }
        if self.n_words < 2 {
            return bad("n_words must be at least 2");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("sentence lengths must satisfy 1 <= min_len <= max_len");
        }
        if !(0.0..=1.0).contains(&self.max_corruption) {
            return bad("max_corruption must lie in [0, 1]");
        }
        if self.n_pairs < 2 {
            return bad("n_pairs must be at least 2");
        }
        Ok(())
    }
}

pub fn word(i: usize) -> String {
    format!("w{i}")
}

/// Source/translation texts with the corrupted fraction of each.
fn draw(cfg: &SyntheticConfig, n: usize, seed: u64) -> Vec<(String, String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let join = |ids: &[usize]| ids.iter().map(|&i| word(i)).collect::<Vec<_>>().join(" ");
    (0..n)
        .map(|_| {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.n_common)).collect();
            let p = rng.gen_range(0.0..=cfg.max_corruption);
            let k = (p * len as f64).round() as usize;
            let mut tgt = src.clone();
            for pos in sample(&mut rng, len, k) {
                let mut w = rng.gen_range(0..cfg.n_words - 1);
                if w >= src[pos] {
                    w += 1;
                }
                tgt[pos] = w;
            }
            (join(&src), join(&tgt), k as f64 / len as f64)
        })
        .collect()
}

/// Generates the labelled pairs. Also returns the corrupted fraction of each
/// pair before standardization.
pub fn generate(cfg: &SyntheticConfig) -> Result<(Vec<QEPair>, Vec<f64>)> {
    cfg.validate()?;
    let rows = draw(cfg, cfg.n_pairs, cfg.seed);
    let fractions: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let neg: Vec<f64> = fractions.iter().map(|f| -f).collect();
    let z = zscore_standardize(&neg)?;
    let pairs = rows
        .into_iter()
        .zip(z)
        .enumerate()
        .map(|(index, ((original, translation, _), z_score))| QEPair { index, original, translation, da_score: None, z_score })
        .collect();
    Ok((pairs, fractions))
}

/// Clean source/target pairs drawn the same way, for augmentation runs.
pub fn parallel_corpus(cfg: &SyntheticConfig, n: usize, seed: u64) -> Result<Vec<ParallelPair>> {
    let clean = SyntheticConfig { max_corruption: 0.0, ..cfg.clone() };
    clean.validate()?;
    Ok(draw(&clean, n, seed).into_iter().map(|(source, target, _)| ParallelPair { source, target }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_track_corruption() {
        let (pairs, fr) = generate(&SyntheticConfig { n_pairs: 300, ..Default::default() }).unwrap();
        assert_eq!(pairs.len(), 300);
        for (p, f) in pairs.iter().zip(&fr) {
            let (a, b): (Vec<&str>, Vec<&str>) = (p.original.split(' ').collect(), p.translation.split(' ').collect());
            assert_eq!(a.len(), b.len());
            let diff = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            assert!((diff as f64 / a.len() as f64 - f).abs() < 1e-12);
        }
        let mean = pairs.iter().map(|p| p.z_score).sum::<f64>() / 300.0;
        assert!(mean.abs() < 1e-10);
    }

    #[test]
    fn parallel_pairs_are_clean() {
        let c = parallel_corpus(&SyntheticConfig::default(), 40, 3).unwrap();
        assert_eq!(c.len(), 40);
        assert!(c.iter().all(|p| p.source == p.target));
    }

    #[test]
    fn deterministic() {
        let c = SyntheticConfig { n_pairs: 50, ..Default::default() };
        assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
    }
}
