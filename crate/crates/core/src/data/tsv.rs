use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::zscore_standardize;
use crate::error::{Error, Result};

/// One scored sentence pair.
#[derive(Clone, Debug, PartialEq)]
pub struct QEPair {
    pub index: usize,
    pub original: String,
    pub translation: String,
    /// Raw direct-assessment score on the 0–100 scale, when the file has one.
    pub da_score: Option<f64>,
    /// Standardized gold score; the regression target.
    pub z_score: f64,
}

/// A sentence and its reference translation from a parallel corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub source: String,
    pub target: String,
}

/// Column positions within a QE TSV.
///
/// `index` falls back to the 0-based data row number when absent. When
/// `z_score` is absent but `score` is present, z-scores are computed by
/// standardizing the score column. When both are absent the file is read as
/// unlabelled and every `z_score` is `0.0`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub index: Option<usize>,
    pub original: usize,
    pub translation: usize,
    pub score: Option<usize>,
    pub z_score: Option<usize>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self { index: Some(0), original: 1, translation: 2, score: Some(3), z_score: Some(4) }
    }
}

impl ColumnMap {
    /// Layout for unlabelled input: index, original, translation.
    pub fn unlabelled() -> Self {
        Self { index: Some(0), original: 1, translation: 2, score: None, z_score: None }
    }

    fn named(&self) -> Vec<(&'static str, usize)> {
        let mut cols = vec![("original", self.original), ("translation", self.translation)];
        cols.extend(self.index.map(|i| ("index", i)));
        cols.extend(self.score.map(|i| ("score", i)));
        cols.extend(self.z_score.map(|i| ("z_score", i)));
        cols
    }

    /// Checks that indices are distinct and fit a header of `width` columns.
    pub fn validate(&self, width: usize) -> Result<()> {
        let cols = self.named();
        for (k, &(name, idx)) in cols.iter().enumerate() {
            if idx >= width {
                return Err(Error::MissingColumn { name, index: idx, width });
            }
            if cols[..k].iter().any(|&(_, other)| other == idx) {
                return Err(Error::InvalidConfig(format!("column index {idx} assigned twice")));
            }
        }
        Ok(())
    }

    pub fn is_labelled(&self) -> bool {
        self.score.is_some() || self.z_score.is_some()
    }

    fn width(&self) -> usize {
        self.named().iter().map(|&(_, i)| i + 1).max().unwrap_or(0)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_score(field: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::malformed(line, format!("{what} {field:?} is not a number")))?;
    if !v.is_finite() {
        return Err(Error::malformed(line, format!("{what} is not finite")));
    }
    Ok(v)
}

/// Reads a QE TSV with a header row. Rows keep file order.
pub fn load_qe_dataset(path: impl AsRef<Path>, map: &ColumnMap) -> Result<Vec<QEPair>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, h)) if !h.trim().is_empty() => h,
        _ => return Err(Error::EmptyFile(path.to_path_buf())),
    };
    map.validate(header.split('\t').count())?;
    let need = map.width();

    let mut pairs = Vec::new();
    let mut raw_scores = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < need {
            return Err(Error::malformed(line_no, format!("expected at least {need} fields, found {}", fields.len())));
        }
        let original = fields[map.original].trim();
        let translation = fields[map.translation].trim();
        if original.is_empty() {
            return Err(Error::malformed(line_no, "empty original"));
        }
        if translation.is_empty() {
            return Err(Error::malformed(line_no, "empty translation"));
        }
        let index = match map.index {
            Some(c) => fields[c]
                .trim()
                .parse()
                .map_err(|_| Error::malformed(line_no, format!("index {:?} is not an integer", fields[c])))?,
            None => pairs.len(),
        };
        // A blank raw score is fine when the z-score is read directly.
        let da_score = match map.score {
            Some(c) if map.z_score.is_some() && fields[c].trim().is_empty() => None,
            Some(c) => Some(parse_score(fields[c], line_no, "score")?),
            None => None,
        };
        let z_score = map.z_score.map(|c| parse_score(fields[c], line_no, "z-score")).transpose()?;
        raw_scores.push(da_score);
        pairs.push(QEPair {
            index,
            original: original.to_string(),
            translation: translation.to_string(),
            da_score,
            z_score: z_score.unwrap_or(0.0),
        });
    }

    if map.z_score.is_none() && map.score.is_some() && !pairs.is_empty() {
        let scores: Vec<f64> = raw_scores.into_iter().map(|s| s.unwrap_or_default()).collect();
        let z = zscore_standardize(&scores)?;
        for (p, z) in pairs.iter_mut().zip(z) {
            p.z_score = z;
        }
    }
    Ok(pairs)
}

/// Writes pairs in the default column layout
/// (`index original translation score z_score`). Missing raw scores are
/// written as empty fields.
pub fn write_qe_dataset(path: impl AsRef<Path>, pairs: &[QEPair]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("index\toriginal\ttranslation\tscore\tz_score\n");
    for p in pairs {
        let score = p.da_score.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", p.index, p.original, p.translation, score, p.z_score));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parallel corpus loaded from `source<TAB>target` lines.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<ParallelPair>,
    pub skipped_blank: usize,
}

/// Reads a headerless parallel corpus. Blank lines are skipped and counted.
pub fn load_parallel_corpus(path: impl AsRef<Path>) -> Result<ParallelCorpus> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut pairs = Vec::new();
    let mut skipped_blank = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            skipped_blank += 1;
            continue;
        }
        let (src, tgt) = line.split_once('\t').ok_or_else(|| Error::malformed(i + 1, "no tab separator"))?;
        let (src, tgt) = (src.trim(), tgt.trim());
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::malformed(i + 1, "empty side"));
        }
        pairs.push(ParallelPair { source: src.to_string(), target: tgt.to_string() });
    }
    Ok(ParallelCorpus { pairs, skipped_blank })
}
