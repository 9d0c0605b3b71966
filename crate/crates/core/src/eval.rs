//! Scoring, prediction files and the largest-error report.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::QEPair;
use crate::error::{Error, Result};
use crate::models::Prediction;

/// Pearson correlation from two-pass centered sums.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::TooFew(format!("pearson needs at least 2 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    if !r.is_finite() {
        return Err(Error::NonFiniteValue("pearson".into()));
    }
    Ok(r)
}

fn paired(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: y.len() });
    }
    if x.is_empty() {
        return Err(Error::Empty);
    }
    Ok(())
}

pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64> {
    paired(x, y)?;
    Ok((x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64).sqrt())
}

pub fn mae(x: &[f64], y: &[f64]) -> Result<f64> {
    paired(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub pearson_r: f64,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn compute(preds: &[f64], golds: &[f64]) -> Result<Self> {
        Ok(Self { pearson_r: pearson(preds, golds)?, rmse: rmse(preds, golds)?, mae: mae(preds, golds)?, n: preds.len() })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pearson_r={}", self.pearson_r)?;
        writeln!(f, "rmse={}", self.rmse)?;
        writeln!(f, "mae={}", self.mae)?;
        writeln!(f, "n={}", self.n)
    }
}

/// Checks that two sequences carry the same segment indices in the same order.
pub fn check_aligned(left: impl Iterator<Item = usize>, right: impl Iterator<Item = usize>) -> Result<()> {
    let (left, right): (Vec<_>, Vec<_>) = (left.collect(), right.collect());
    if left.len() != right.len() {
        return Err(Error::LengthMismatch { left: left.len(), right: right.len() });
    }
    match left.iter().zip(&right).position(|(a, b)| a != b) {
        Some(position) => Err(Error::IndexMismatch { position, left: left[position], right: right[position] }),
        None => Ok(()),
    }
}

/// Scores predictions against gold pairs matched by segment index.
pub fn evaluate_predictions(preds: &[Prediction], gold: &[QEPair]) -> Result<EvalReport> {
    let mut gold_sorted: Vec<&QEPair> = gold.iter().collect();
    gold_sorted.sort_by_key(|p| p.index);
    let mut pred_sorted: Vec<&Prediction> = preds.iter().collect();
    pred_sorted.sort_by_key(|p| p.index);
    check_aligned(pred_sorted.iter().map(|p| p.index), gold_sorted.iter().map(|p| p.index))?;
    let p: Vec<f64> = pred_sorted.iter().map(|p| p.score).collect();
    let g: Vec<f64> = gold_sorted.iter().map(|p| p.z_score).collect();
    EvalReport::compute(&p, &g)
}

/// Writes `index<TAB>score` lines in ascending index order. Scores use the
/// shortest representation that round-trips exactly.
pub fn write_predictions(preds: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut sorted = preds.to_vec();
    sorted.sort_by_key(|p| p.index);
    let mut out = String::new();
    for p in &sorted {
        if !p.score.is_finite() {
            return Err(Error::NonFiniteValue(format!("prediction for segment {}", p.index)));
        }
        out.push_str(&format!("{}\t{}\n", p.index, p.score));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashMap::new();
    let mut preds = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (idx, score) = line.split_once('\t').ok_or_else(|| Error::malformed(line_no, "expected index<TAB>score"))?;
        let index: usize =
            idx.trim().parse().map_err(|_| Error::malformed(line_no, format!("bad index {idx:?}")))?;
        let score: f64 =
            score.trim().parse().map_err(|_| Error::malformed(line_no, format!("bad score {score:?}")))?;
        if !score.is_finite() {
            return Err(Error::malformed(line_no, "non-finite score"));
        }
        if seen.insert(index, line_no).is_some() {
            return Err(Error::DuplicateIndex { index, line: line_no });
        }
        preds.push(Prediction { index, score });
    }
    Ok(preds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorCase {
    pub index: usize,
    pub original: String,
    pub translation: String,
    pub gold: f64,
    pub predicted: f64,
    pub abs_diff: f64,
}

/// The `k` pairs with the largest absolute prediction error, largest first;
/// ties go to the lower segment index.
pub fn error_report(pairs: &[QEPair], preds: &[Prediction], k: usize) -> Result<Vec<ErrorCase>> {
    check_aligned(pairs.iter().map(|p| p.index), preds.iter().map(|p| p.index))?;
    let mut cases: Vec<ErrorCase> = pairs
        .iter()
        .zip(preds)
        .map(|(p, q)| ErrorCase {
            index: p.index,
            original: p.original.clone(),
            translation: p.translation.clone(),
            gold: p.z_score,
            predicted: q.score,
            abs_diff: (p.z_score - q.score).abs(),
        })
        .collect();
    cases.sort_by(|a, b| b.abs_diff.total_cmp(&a.abs_diff).then(a.index.cmp(&b.index)));
    cases.truncate(k);
    Ok(cases)
}
