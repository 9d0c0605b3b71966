use std::collections::HashMap;

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";

/// Token/id mapping shared by both sides of a sentence pair.
///
/// Ids `0..4` are reserved for `[CLS]`, `[SEP]`, `[PAD]` and `[UNK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    to_id: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    pub const CLS_ID: usize = 0;
    pub const SEP_ID: usize = 1;
    pub const PAD_ID: usize = 2;
    pub const UNK_ID: usize = 3;
    pub const N_SPECIAL: usize = 4;

    /// Rebuilds a vocabulary from its id-ordered token list, as stored in
    /// checkpoints.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let specials = [CLS, SEP, PAD, UNK];
        if tokens.len() < Self::N_SPECIAL || tokens[..Self::N_SPECIAL].iter().zip(specials).any(|(a, b)| a != b) {
            return Err(Error::InvalidConfig("vocabulary must start with [CLS] [SEP] [PAD] [UNK]".into()));
        }
        let mut to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if to_id.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { to_id, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Keeps the `max_size - 4` most frequent case-folded whitespace tokens,
/// breaking count ties lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab> {
    if max_size <= Vocab::N_SPECIAL {
        return Err(Error::InvalidConfig(format!("vocabulary max_size must exceed 4, got {max_size}")));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for w in words(line.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - Vocab::N_SPECIAL);

    let mut tokens: Vec<String> = [CLS, SEP, PAD, UNK].iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    Vocab::from_tokens(tokens)
}

/// Case-folded whitespace tokenization with `[UNK]` fallback.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    words(text).map(|w| vocab.id(&w).unwrap_or(Vocab::UNK_ID)).collect()
}
