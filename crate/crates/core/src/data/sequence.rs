use super::tsv::QEPair;
use super::vocab::{tokenize, Vocab};

/// Hard cap on encoder input length.
pub const MAX_SEQUENCE_LEN: usize = 512;

/// Encoder input: token ids with their segment ids and attention mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// 1 for real tokens, 0 for padding.
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Appends `[PAD]` up to `len` positions (no-op if already that long).
    pub fn pad_to(&mut self, len: usize) {
        while self.token_ids.len() < len {
            self.token_ids.push(Vocab::PAD_ID);
            self.segment_ids.push(0);
            self.attention_mask.push(0);
        }
    }

    fn single(ids: &[usize]) -> Self {
        let mut token_ids = Vec::with_capacity(ids.len() + 2);
        token_ids.push(Vocab::CLS_ID);
        token_ids.extend_from_slice(ids);
        token_ids.push(Vocab::SEP_ID);
        let n = token_ids.len();
        Self { token_ids, segment_ids: vec![0; n], attention_mask: vec![1; n] }
    }
}

/// Pads every sequence in a batch to the batch maximum.
pub fn pad_batch(batch: &mut [TokenSequence]) {
    let len = batch.iter().map(TokenSequence::len).max().unwrap_or(0);
    for s in batch {
        s.pad_to(len);
    }
}

/// Drops trailing tokens of the currently longer side until the two fit in
/// `budget`. On equal lengths the first side is shortened.
pub fn truncate_longest_first(a: &mut Vec<usize>, b: &mut Vec<usize>, budget: usize) {
    while a.len() + b.len() > budget {
        if b.len() > a.len() {
            b.pop();
        } else {
            a.pop();
        }
    }
}

/// `[CLS] original [SEP] translation [SEP]`, segment 0 up to and including
/// the first `[SEP]`, segment 1 after it.
///
/// `max_len` is clamped to `[5, 512]`.
pub fn encode_pair_mono(pair: &QEPair, vocab: &Vocab, max_len: usize) -> TokenSequence {
    let max_len = max_len.clamp(5, MAX_SEQUENCE_LEN);
    let mut src = tokenize(&pair.original, vocab);
    let mut tgt = tokenize(&pair.translation, vocab);
    truncate_longest_first(&mut src, &mut tgt, max_len - 3);

    let first = src.len() + 2;
    let total = first + tgt.len() + 1;
    let mut token_ids = Vec::with_capacity(total);
    token_ids.push(Vocab::CLS_ID);
    token_ids.extend(src);
    token_ids.push(Vocab::SEP_ID);
    token_ids.extend(tgt);
    token_ids.push(Vocab::SEP_ID);
    let segment_ids = (0..total).map(|i| usize::from(i >= first)).collect();
    TokenSequence { token_ids, segment_ids, attention_mask: vec![1; total] }
}

/// Two independent `[CLS] side [SEP]` sequences, each truncated to `max_len`.
///
/// `max_len` is clamped to `[3, 512]`.
pub fn encode_pair_siamese(pair: &QEPair, vocab: &Vocab, max_len: usize) -> (TokenSequence, TokenSequence) {
    let max_len = max_len.clamp(3, MAX_SEQUENCE_LEN);
    let side = |text: &str| {
        let mut ids = tokenize(text, vocab);
        ids.truncate(max_len - 2);
        TokenSequence::single(&ids)
    };
    (side(&pair.original), side(&pair.translation))
}
