//! Prediction ensembling and parallel-corpus data augmentation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ParallelPair, QEPair};
use crate::error::{Error, Result};
use crate::eval::{check_aligned, pearson};
use crate::models::Prediction;

const WEIGHT_TOLERANCE: f64 = 1e-12;

/// Blend weights for two prediction sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub weight_a: f64,
    pub weight_b: f64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self { weight_a: 0.8, weight_b: 0.2 }
    }
}

impl EnsembleSpec {
    pub fn new(weight_a: f64, weight_b: f64) -> Result<Self> {
        let spec = Self { weight_a, weight_b };
        spec.validate()?;
        Ok(spec)
    }

    /// `weight_a : 1 - weight_a`.
    pub fn from_weight_a(weight_a: f64) -> Result<Self> {
        Self::new(weight_a, 1.0 - weight_a)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.weight_a.is_finite()
            && self.weight_b.is_finite()
            && self.weight_a >= 0.0
            && self.weight_b >= 0.0
            && (self.weight_a + self.weight_b - 1.0).abs() <= WEIGHT_TOLERANCE;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "ensemble weights must be non-negative and sum to 1, got {}:{}",
                self.weight_a, self.weight_b
            )))
        }
    }

    pub fn swapped(&self) -> Self {
        Self { weight_a: self.weight_b, weight_b: self.weight_a }
    }

    /// The 0.8:0.2, 0.6:0.4 and 0.5:0.5 grid.
    pub fn default_grid() -> Vec<Self> {
        vec![Self { weight_a: 0.8, weight_b: 0.2 }, Self { weight_a: 0.6, weight_b: 0.4 }, Self { weight_a: 0.5, weight_b: 0.5 }]
    }
}

/// Per-segment `weight_a * a + weight_b * b`.
pub fn ensemble_predict(preds_a: &[Prediction], preds_b: &[Prediction], spec: &EnsembleSpec) -> Result<Vec<Prediction>> {
    spec.validate()?;
    check_aligned(preds_a.iter().map(|p| p.index), preds_b.iter().map(|p| p.index))?;
    Ok(preds_a
        .iter()
        .zip(preds_b)
        .map(|(a, b)| Prediction { index: a.index, score: spec.weight_a * a.score + spec.weight_b * b.score })
        .collect())
}

/// Candidate whose blend correlates best with `golds`; near-ties (within
/// 1e-12) go to the larger `weight_a`.
pub fn grid_select_weight(
    preds_a: &[Prediction],
    preds_b: &[Prediction],
    golds: &[f64],
    candidates: &[EnsembleSpec],
) -> Result<EnsembleSpec> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no ensemble candidates".into()));
    }
    let mut best: Option<(EnsembleSpec, f64)> = None;
    for c in candidates {
        let blend: Vec<f64> = ensemble_predict(preds_a, preds_b, c)?.iter().map(|p| p.score).collect();
        let r = pearson(&blend, golds)?;
        best = match best {
            None => Some((*c, r)),
            Some((b, br)) => {
                let better = r > br + WEIGHT_TOLERANCE
                    || ((r - br).abs() <= WEIGHT_TOLERANCE && c.weight_a > b.weight_a);
                Some(if better { (*c, r) } else { (b, br) })
            }
        };
    }
    Ok(best.expect("non-empty candidates").0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum LabelPolicy {
    /// Largest z-score observed in the training set.
    MaxObservedZ,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub n_pairs: usize,
    pub label_policy: LabelPolicy,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { n_pairs: 2000, label_policy: LabelPolicy::MaxObservedZ, seed: 777 }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        match self.label_policy {
            LabelPolicy::Fixed(v) if !v.is_finite() => {
                Err(Error::InvalidConfig(format!("fixed augmentation label must be finite, got {v}")))
            }
            _ => Ok(()),
        }
    }
}

/// Appends `n_pairs` corpus pairs, sampled uniformly without replacement
/// and labelled per the policy. Appended rows get indices after the largest
/// existing one, in sample order.
pub fn augment_dataset(train: &[QEPair], corpus: &[ParallelPair], policy: &AugmentPolicy) -> Result<Vec<QEPair>> {
    policy.validate()?;
    let mut out = train.to_vec();
    if policy.n_pairs == 0 {
        return Ok(out);
    }
    if corpus.len() < policy.n_pairs {
        return Err(Error::CorpusTooSmall { have: corpus.len(), need: policy.n_pairs });
    }
    let label = match policy.label_policy {
        LabelPolicy::Fixed(v) => v,
        LabelPolicy::MaxObservedZ => {
            train.iter().map(|p| p.z_score).reduce(f64::max).ok_or(Error::EmptyTrain)?
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let picks = rand::seq::index::sample(&mut rng, corpus.len(), policy.n_pairs);
    let next = train.iter().map(|p| p.index + 1).max().unwrap_or(0);
    out.reserve(policy.n_pairs);
    for (k, i) in picks.into_iter().enumerate() {
        let c = &corpus[i];
        out.push(QEPair {
            index: next + k,
            original: c.source.clone(),
            translation: c.target.clone(),
            da_score: None,
            z_score: label,
        });
    }
    Ok(out)
}
