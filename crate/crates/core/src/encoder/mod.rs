//! From-scratch transformer encoder with learned position and segment
//! embeddings, pre-norm blocks and a final layer norm.

mod checkpoint;
mod params;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, ArchitectureKind, Checkpoint, CheckpointMeta, NamedArray, TrainingMeta, FORMAT_VERSION, MAGIC};
pub use params::{EncoderParams, LayerParams};

use crate::data::{TokenSequence, MAX_SEQUENCE_LEN};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Added to attention logits of padded key positions.
pub const MASK_LOGIT: f64 = -1e9;

pub type EncoderWeights = EncoderParams<Tensor>;

/// Encoder hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl EncoderConfig {
    /// 2 layers, `d_model = 32`, 2 heads, `d_ff = 64`.
    pub fn toy(vocab_size: usize) -> Self {
        Self { vocab_size, d_model: 32, n_layers: 2, n_heads: 2, d_ff: 64, max_len: 128, dropout_rate: 0.1, seed: 0 }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Valid configs may have `n_layers == 0`; every other size is at least 1.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_len > MAX_SEQUENCE_LEN {
            return bad(format!("max_len {} exceeds {MAX_SEQUENCE_LEN}", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Xavier-uniform weight matrix, drawn from `rng`. Used for the regression head.
pub(crate) fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    xavier(rng, fan_in, fan_out)
}

/// Deterministic initialization from `config.seed`: Xavier-uniform
/// projections, zero biases, N(0, 0.02) embeddings, unit layer-norm gains.
pub fn init_weights(config: &EncoderConfig) -> Result<EncoderWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let ones = || Tensor::full(vec![d], 1.0).expect("finite");
    let zeros = |n: usize| Tensor::zeros(vec![n]);

    let token_emb = normal(&mut rng, config.vocab_size, d, 0.02);
    let position_emb = normal(&mut rng, config.max_len, d, 0.02);
    let segment_emb = normal(&mut rng, 2, d, 0.02);
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            ln1_gamma: ones(),
            ln1_beta: zeros(d),
            wq: xavier(&mut rng, d, d),
            bq: zeros(d),
            wk: xavier(&mut rng, d, d),
            bk: zeros(d),
            wv: xavier(&mut rng, d, d),
            bv: zeros(d),
            wo: xavier(&mut rng, d, d),
            bo: zeros(d),
            ln2_gamma: ones(),
            ln2_beta: zeros(d),
            w1: xavier(&mut rng, d, config.d_ff),
            b1: zeros(config.d_ff),
            w2: xavier(&mut rng, config.d_ff, d),
            b2: zeros(d),
        })
        .collect();
    Ok(EncoderParams { token_emb, position_emb, segment_emb, layers, final_gamma: ones(), final_beta: zeros(d) })
}

/// Whether dropout is active. Training mode carries the mask RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Train(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let n = tape.value(x).numel();
            let mask = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
            tape.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn self_attention(
    tape: &mut Tape,
    x: Var,
    layer: &LayerParams<Var>,
    config: &EncoderConfig,
    key_mask: Var,
    mut probe: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let q = linear(tape, x, layer.wq, layer.bq)?;
    let k = linear(tape, x, layer.wk, layer.bk)?;
    let v = linear(tape, x, layer.wv, layer.bv)?;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let logits = tape.matmul_bt(qh, kh)?;
        let logits = tape.scale(logits, scale)?;
        let logits = tape.add_row(logits, key_mask)?;
        let weights = tape.softmax_rows(logits)?;
        if let Some(p) = probe.as_deref_mut() {
            p.push(weights);
        }
        heads.push(tape.matmul(weights, vh)?);
    }
    let ctx = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    linear(tape, ctx, layer.wo, layer.bo)
}

/// Checks length and ids against the config before any tape work.
pub fn validate_sequence(config: &EncoderConfig, seq: &TokenSequence) -> Result<()> {
    let len = seq.len();
    if len > config.max_len {
        return Err(Error::SequenceTooLong { len, max_len: config.max_len });
    }
    if len == 0 || seq.segment_ids.len() != len || seq.attention_mask.len() != len {
        return Err(Error::ShapeMismatch(format!(
            "token/segment/mask lengths {}/{}/{}",
            len,
            seq.segment_ids.len(),
            seq.attention_mask.len()
        )));
    }
    if let Some(&id) = seq.token_ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::IdOutOfRange { id, vocab_size: config.vocab_size });
    }
    if let Some(&s) = seq.segment_ids.iter().find(|&&s| s > 1) {
        return Err(Error::IdOutOfRange { id: s, vocab_size: 2 });
    }
    Ok(())
}

/// Runs the encoder on one sequence, recording on `tape`. Returns the
/// `len × d_model` hidden states.
pub fn encoder_forward(
    tape: &mut Tape,
    params: &EncoderParams<Var>,
    config: &EncoderConfig,
    seq: &TokenSequence,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    forward_inner(tape, params, config, seq, mode, None)
}

fn forward_inner(
    tape: &mut Tape,
    params: &EncoderParams<Var>,
    config: &EncoderConfig,
    seq: &TokenSequence,
    mode: &mut Mode<'_>,
    mut probe: Option<&mut Vec<Var>>,
) -> Result<Var> {
    validate_sequence(config, seq)?;
    let len = seq.len();
    let positions: Vec<usize> = (0..len).collect();

    let tok = tape.gather(params.token_emb, &seq.token_ids)?;
    let pos = tape.gather(params.position_emb, &positions)?;
    let seg = tape.gather(params.segment_emb, &seq.segment_ids)?;
    let emb = tape.add(tok, pos)?;
    let emb = tape.add(emb, seg)?;
    let mut h = dropout(tape, emb, config.dropout_rate, mode)?;

    let mask: Vec<f64> = seq.attention_mask.iter().map(|&m| if m == 1 { 0.0 } else { MASK_LOGIT }).collect();
    let key_mask = tape.constant(Tensor::from_parts(vec![len], mask));

    for layer in &params.layers {
        let a = tape.layer_norm(h, layer.ln1_gamma, layer.ln1_beta, LAYER_NORM_EPS)?;
        let a = self_attention(tape, a, layer, config, key_mask, probe.as_deref_mut())?;
        let a = dropout(tape, a, config.dropout_rate, mode)?;
        h = tape.add(h, a)?;

        let f = tape.layer_norm(h, layer.ln2_gamma, layer.ln2_beta, LAYER_NORM_EPS)?;
        let f = linear(tape, f, layer.w1, layer.b1)?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, layer.w2, layer.b2)?;
        let f = dropout(tape, f, config.dropout_rate, mode)?;
        h = tape.add(h, f)?;
    }
    tape.layer_norm(h, params.final_gamma, params.final_beta, LAYER_NORM_EPS)
}

/// Places every weight on `tape` as a leaf.
pub fn register(tape: &mut Tape, weights: &EncoderWeights, requires_grad: bool) -> EncoderParams<Var> {
    weights
        .try_map("", &mut |_, t| Ok(tape.leaf(t.clone(), requires_grad)))
        .expect("registration is infallible")
}

/// Eval-mode forward pass on a private tape.
pub fn encode(weights: &EncoderWeights, config: &EncoderConfig, seq: &TokenSequence) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, weights, false);
    let out = encoder_forward(&mut tape, &vars, config, seq, &mut Mode::Eval)?;
    Ok(tape.value(out).clone())
}

/// Eval-mode attention weight matrices (`len × len`), layer-major then by head.
pub fn attention_maps(weights: &EncoderWeights, config: &EncoderConfig, seq: &TokenSequence) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, weights, false);
    let mut probe = Vec::new();
    forward_inner(&mut tape, &vars, config, seq, &mut Mode::Eval, Some(&mut probe))?;
    Ok(probe.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Shapes each parameter must have under `config`, in visiting order.
pub fn expected_shapes(config: &EncoderConfig) -> Result<EncoderParams<Vec<usize>>> {
    let template = init_weights(&EncoderConfig { seed: 0, ..config.clone() })?;
    template.try_map("", &mut |_, t| Ok(t.shape().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocab;

    fn cfg(d_model: usize, n_heads: usize, n_layers: usize) -> EncoderConfig {
        EncoderConfig { vocab_size: 20, d_model, n_layers, n_heads, d_ff: 2 * d_model, max_len: 16, dropout_rate: 0.1, seed: 7 }
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence { token_ids: ids.to_vec(), segment_ids: vec![0; ids.len()], attention_mask: vec![1; ids.len()] }
    }

    #[test]
    fn init_is_deterministic() {
        let c = cfg(16, 2, 2);
        assert_eq!(init_weights(&c).unwrap(), init_weights(&c).unwrap());
        let other = init_weights(&EncoderConfig { seed: 8, ..c }).unwrap();
        assert_ne!(other, init_weights(&cfg(16, 2, 2)).unwrap());
    }

    #[test]
    fn init_shapes() {
        let c = cfg(16, 2, 2);
        assert_eq!(c.head_dim(), 8);
        let w = init_weights(&c).unwrap();
        assert_eq!(w.token_emb.shape(), &[20, 16]);
        assert_eq!(w.position_emb.shape(), &[16, 16]);
        assert_eq!(w.segment_emb.shape(), &[2, 16]);
        assert_eq!(w.layers.len(), 2);
        assert_eq!(w.layers[0].wq.shape(), &[16, 16]);
        assert_eq!(w.layers[0].w1.shape(), &[16, 32]);
        assert_eq!(w.layers[0].w2.shape(), &[32, 16]);
        assert!(w.layers[0].bq.data().iter().all(|&v| v == 0.0));
        let bound = (6.0f64 / 32.0).sqrt();
        assert!(w.layers[1].wk.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn invalid_configs() {
        assert!(matches!(init_weights(&cfg(10, 3, 1)), Err(Error::InvalidConfig(_))));
        assert!(init_weights(&EncoderConfig { max_len: 513, ..cfg(8, 2, 1) }).is_err());
        assert!(init_weights(&EncoderConfig { dropout_rate: 1.0, ..cfg(8, 2, 1) }).is_err());
        assert!(init_weights(&EncoderConfig { vocab_size: 0, ..cfg(8, 2, 1) }).is_err());
    }

    #[test]
    fn output_shape_and_errors() {
        let c = cfg(8, 2, 2);
        let w = init_weights(&c).unwrap();
        let out = encode(&w, &c, &seq(&[0, 5, 6, 1])).unwrap();
        assert_eq!(out.shape(), &[4, 8]);
        assert!(matches!(encode(&w, &c, &seq(&[0; 17])), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(encode(&w, &c, &seq(&[0, 20])), Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn zero_layers_is_normalized_embedding_sum() {
        let c = cfg(8, 2, 0);
        let w = init_weights(&c).unwrap();
        let s = seq(&[0, 4, 1]);
        let out = encode(&w, &c, &s).unwrap();
        for (i, &id) in s.token_ids.iter().enumerate() {
            let row: Vec<f64> =
                (0..8).map(|j| w.token_emb.row(id)[j] + w.position_emb.row(i)[j] + w.segment_emb.row(0)[j]).collect();
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for (got, x) in out.row(i).iter().zip(&row) {
                let want = (x - mean) / (var + LAYER_NORM_EPS).sqrt();
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pad_ids_do_not_leak() {
        let c = cfg(8, 2, 2);
        let w = init_weights(&c).unwrap();
        let mut s = seq(&[0, 5, 6, 1]);
        s.pad_to(7);
        let base = encode(&w, &c, &s).unwrap();
        s.token_ids[5] = 9;
        let changed = encode(&w, &c, &s).unwrap();
        for i in 0..4 {
            for (a, b) in base.row(i).iter().zip(changed.row(i)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        // appending padding leaves real positions untouched
        let short = encode(&w, &c, &seq(&[0, 5, 6, 1])).unwrap();
        for i in 0..4 {
            for (a, b) in base.row(i).iter().zip(short.row(i)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert_eq!(s.token_ids[6], Vocab::PAD_ID);
    }

    #[test]
    fn eval_forward_is_deterministic_and_dropout_only_in_train() {
        let c = cfg(8, 2, 2);
        let w = init_weights(&c).unwrap();
        let s = seq(&[0, 5, 6, 7, 1]);
        assert_eq!(encode(&w, &c, &s).unwrap(), encode(&w, &c, &s).unwrap());

        let mut tape = Tape::new();
        let vars = register(&mut tape, &w, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tr = encoder_forward(&mut tape, &vars, &c, &s, &mut Mode::Train(&mut rng)).unwrap();
        assert_ne!(tape.value(tr), &encode(&w, &c, &s).unwrap());
    }
}
