//! The two quality-estimation architectures.
//!
//! * [`MonoModel`]: one encoder over `[CLS] original [SEP] translation [SEP]`,
//!   pooled (CLS by default) and fed to a single linear unit.
//! * [`SiameseModel`]: original and translation go through two encoders
//!   (separate weights by default), are pooled (MEAN by default) and compared
//!   by cosine similarity.
//!
//! Both are trained against z-scores with mean squared error.

mod pooling;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use pooling::{pool, pool_on_tape, PoolingStrategy};

use crate::data::{encode_pair_mono, encode_pair_siamese, QEPair, TokenSequence, Vocab};
use crate::encoder::{
    encoder_forward, expected_shapes, init_weights, register, xavier_uniform, ArchitectureKind, Checkpoint,
    CheckpointMeta, EncoderConfig, EncoderParams, EncoderWeights, Mode, NamedArray, TrainingMeta,
};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Affine map between z-scores and the space a model was trained in:
/// `raw = scale * z + shift`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputMap {
    pub scale: f64,
    pub shift: f64,
}

impl OutputMap {
    /// Maps `[lo, hi]` onto `[-1, 1]`.
    pub fn unit_interval(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::DegenerateVariance);
        }
        let scale = 2.0 / (hi - lo);
        Ok(Self { scale, shift: -1.0 - lo * scale })
    }

    pub fn to_raw(&self, z: f64) -> f64 {
        self.scale * z + self.shift
    }

    pub fn to_z(&self, raw: f64) -> f64 {
        (raw - self.shift) / self.scale
    }
}

/// One scored prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub index: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonoModel {
    pub config: EncoderConfig,
    pub encoder: EncoderWeights,
    pub pooling: PoolingStrategy,
    /// `[d_model × 1]`
    pub head_weight: Tensor,
    /// `[1]`
    pub head_bias: Tensor,
    pub output_map: Option<OutputMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiameseModel {
    pub config: EncoderConfig,
    pub encoder_a: EncoderWeights,
    /// `None` when both branches share `encoder_a`.
    pub encoder_b: Option<EncoderWeights>,
    pub pooling: PoolingStrategy,
    pub output_map: Option<OutputMap>,
}

impl SiameseModel {
    pub fn share_weights(&self) -> bool {
        self.encoder_b.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QEModel {
    Mono(MonoModel),
    Siamese(SiameseModel),
}

/// Encoder-ready form of one sentence pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncodedInput {
    Mono(TokenSequence),
    Siamese(TokenSequence, TokenSequence),
}

/// Tape handles for every model parameter.
pub enum ModelVars {
    Mono { encoder: EncoderParams<Var>, head_weight: Var, head_bias: Var },
    Siamese { a: EncoderParams<Var>, b: Option<EncoderParams<Var>> },
}

impl ModelVars {
    /// Visits handles in the same order as [`QEModel::visit_params`].
    pub fn visit(&self, f: &mut dyn FnMut(Var)) {
        match self {
            ModelVars::Mono { encoder, head_weight, head_bias } => {
                encoder.visit("", &mut |_, v| f(*v));
                f(*head_weight);
                f(*head_bias);
            }
            ModelVars::Siamese { a, b } => {
                a.visit("", &mut |_, v| f(*v));
                if let Some(b) = b {
                    b.visit("", &mut |_, v| f(*v));
                }
            }
        }
    }

    pub fn to_vec(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.visit(&mut |v| out.push(v));
        out
    }
}

/// Seed offset for parameters drawn after the encoder (mono head, second
/// siamese encoder).
const AUX_SEED_OFFSET: u64 = 0x5EED;

impl QEModel {
    pub fn mono(config: EncoderConfig, pooling: PoolingStrategy) -> Result<Self> {
        let encoder = init_weights(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(AUX_SEED_OFFSET));
        let head_weight = xavier_uniform(&mut rng, config.d_model, 1);
        Ok(QEModel::Mono(MonoModel {
            config,
            encoder,
            pooling,
            head_weight,
            head_bias: Tensor::zeros(vec![1]),
            output_map: None,
        }))
    }

    /// Mono model with CLS pooling.
    pub fn mono_default(config: EncoderConfig) -> Result<Self> {
        Self::mono(config, PoolingStrategy::Cls)
    }

    pub fn siamese(config: EncoderConfig, pooling: PoolingStrategy, share_weights: bool) -> Result<Self> {
        let encoder_a = init_weights(&config)?;
        let encoder_b = if share_weights {
            None
        } else {
            Some(init_weights(&EncoderConfig { seed: config.seed.wrapping_add(AUX_SEED_OFFSET), ..config.clone() })?)
        };
        Ok(QEModel::Siamese(SiameseModel { config, encoder_a, encoder_b, pooling, output_map: None }))
    }

    /// Siamese model with MEAN pooling and separate encoders.
    pub fn siamese_default(config: EncoderConfig) -> Result<Self> {
        Self::siamese(config, PoolingStrategy::Mean, false)
    }

    pub fn kind(&self) -> ArchitectureKind {
        match self {
            QEModel::Mono(_) => ArchitectureKind::Mono,
            QEModel::Siamese(_) => ArchitectureKind::Siamese,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        match self {
            QEModel::Mono(m) => &m.config,
            QEModel::Siamese(m) => &m.config,
        }
    }

    pub fn pooling(&self) -> PoolingStrategy {
        match self {
            QEModel::Mono(m) => m.pooling,
            QEModel::Siamese(m) => m.pooling,
        }
    }

    pub fn output_map(&self) -> Option<OutputMap> {
        match self {
            QEModel::Mono(m) => m.output_map,
            QEModel::Siamese(m) => m.output_map,
        }
    }

    pub fn set_output_map(&mut self, map: Option<OutputMap>) {
        match self {
            QEModel::Mono(m) => m.output_map = map,
            QEModel::Siamese(m) => m.output_map = map,
        }
    }

    pub fn encode_input(&self, pair: &QEPair, vocab: &Vocab) -> EncodedInput {
        let max_len = self.config().max_len;
        match self {
            QEModel::Mono(_) => EncodedInput::Mono(encode_pair_mono(pair, vocab, max_len)),
            QEModel::Siamese(_) => {
                let (a, b) = encode_pair_siamese(pair, vocab, max_len);
                EncodedInput::Siamese(a, b)
            }
        }
    }

    /// Visits every trainable tensor in a fixed order with its checkpoint name.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            QEModel::Mono(m) => {
                m.encoder.visit("encoder.", f);
                f("head.weight".into(), &m.head_weight);
                f("head.bias".into(), &m.head_bias);
            }
            QEModel::Siamese(m) => {
                m.encoder_a.visit("encoder_a.", f);
                if let Some(b) = &m.encoder_b {
                    b.visit("encoder_b.", f);
                }
            }
        }
    }

    pub fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        match self {
            QEModel::Mono(m) => {
                m.encoder.visit_mut("encoder.", f);
                f("head.weight".into(), &mut m.head_weight);
                f("head.bias".into(), &mut m.head_bias);
            }
            QEModel::Siamese(m) => {
                m.encoder_a.visit_mut("encoder_a.", f);
                if let Some(b) = &mut m.encoder_b {
                    b.visit_mut("encoder_b.", f);
                }
            }
        }
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        self.visit_params(&mut |_, t| sizes.push(t.numel()));
        sizes
    }

    pub fn num_parameters(&self) -> usize {
        self.param_sizes().iter().sum()
    }

    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> ModelVars {
        match self {
            QEModel::Mono(m) => ModelVars::Mono {
                encoder: register(tape, &m.encoder, requires_grad),
                head_weight: tape.leaf(m.head_weight.clone(), requires_grad),
                head_bias: tape.leaf(m.head_bias.clone(), requires_grad),
            },
            QEModel::Siamese(m) => ModelVars::Siamese {
                a: register(tape, &m.encoder_a, requires_grad),
                b: m.encoder_b.as_ref().map(|b| register(tape, b, requires_grad)),
            },
        }
    }

    /// Rebuilds parameter handles from a flat list in
    /// [`visit_params`](Self::visit_params) order.
    pub fn bind(&self, vars: &[Var]) -> Result<ModelVars> {
        let expected = self.param_sizes().len();
        if vars.len() != expected {
            return Err(Error::LengthMismatch { left: vars.len(), right: expected });
        }
        let mut it = vars.iter().copied();
        let mut next = |_: &str, _: &Tensor| Ok(it.next().expect("length checked"));
        Ok(match self {
            QEModel::Mono(m) => {
                let encoder = m.encoder.try_map("", &mut next)?;
                let head_weight = next("", &m.head_weight)?;
                let head_bias = next("", &m.head_bias)?;
                ModelVars::Mono { encoder, head_weight, head_bias }
            }
            QEModel::Siamese(m) => {
                let a = m.encoder_a.try_map("", &mut next)?;
                let b = match &m.encoder_b {
                    Some(b) => Some(b.try_map("", &mut next)?),
                    None => None,
                };
                ModelVars::Siamese { a, b }
            }
        })
    }

    /// Owned copies of every parameter in visit order.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, t| out.push(t.clone()));
        out
    }

    /// Raw model output for one input, recorded on `tape`: the linear head
    /// value for mono models, the cosine for siamese ones.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, input: &EncodedInput, mode: &mut Mode<'_>) -> Result<Var> {
        match (self, vars, input) {
            (QEModel::Mono(m), ModelVars::Mono { encoder, head_weight, head_bias }, EncodedInput::Mono(seq)) => {
                let hidden = encoder_forward(tape, encoder, &m.config, seq, mode)?;
                let pooled = pool_on_tape(tape, hidden, &seq.attention_mask, m.pooling)?;
                let row = tape.reshape(pooled, vec![1, m.config.d_model])?;
                let out = tape.matmul(row, *head_weight)?;
                tape.add_row(out, *head_bias)
            }
            (QEModel::Siamese(m), ModelVars::Siamese { a, b }, EncodedInput::Siamese(sa, sb)) => {
                let ha = encoder_forward(tape, a, &m.config, sa, mode)?;
                let hb = encoder_forward(tape, b.as_ref().unwrap_or(a), &m.config, sb, mode)?;
                let u = pool_on_tape(tape, ha, &sa.attention_mask, m.pooling)?;
                let v = pool_on_tape(tape, hb, &sb.attention_mask, m.pooling)?;
                tape.cosine(u, v)
            }
            _ => Err(Error::InvalidConfig("input encoding does not match model architecture".into())),
        }
    }

    /// Eval-mode raw output.
    pub fn predict_raw(&self, input: &EncodedInput) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let out = self.forward(&mut tape, &vars, input, &mut Mode::Eval)?;
        Ok(tape.value(out).item().expect("scalar model output"))
    }

    /// Eval-mode prediction in z-score space.
    pub fn predict(&self, input: &EncodedInput) -> Result<f64> {
        let raw = self.predict_raw(input)?;
        Ok(self.output_map().map_or(raw, |m| m.to_z(raw)))
    }

    /// Parallel prediction; output order matches `inputs`.
    pub fn predict_batch(&self, inputs: &[EncodedInput]) -> Result<Vec<f64>> {
        inputs.par_iter().map(|x| self.predict(x)).collect()
    }

    /// Predictions for QE pairs, tagged with their segment indices.
    pub fn predict_pairs(&self, pairs: &[QEPair], vocab: &Vocab) -> Result<Vec<Prediction>> {
        let inputs: Vec<EncodedInput> = pairs.iter().map(|p| self.encode_input(p, vocab)).collect();
        let scores = self.predict_batch(&inputs)?;
        Ok(pairs.iter().zip(scores).map(|(p, score)| Prediction { index: p.index, score }).collect())
    }

    pub fn to_checkpoint(&self, vocab: &Vocab, training: TrainingMeta) -> Checkpoint {
        let mut arrays = Vec::new();
        self.visit_params(&mut |name, t| arrays.push(NamedArray { name, values: t.data().to_vec() }));
        let (share_weights, encoders) = match self {
            QEModel::Mono(m) => (false, vec![m.config.clone()]),
            QEModel::Siamese(m) => {
                let mut cfgs = vec![m.config.clone()];
                if m.encoder_b.is_some() {
                    cfgs.push(EncoderConfig { seed: m.config.seed.wrapping_add(AUX_SEED_OFFSET), ..m.config.clone() });
                }
                (m.share_weights(), cfgs)
            }
        };
        Checkpoint {
            meta: CheckpointMeta {
                kind: self.kind(),
                encoders,
                pooling: self.pooling(),
                share_weights,
                output_map: self.output_map(),
                vocab: vocab.tokens().to_vec(),
                training,
            },
            arrays,
        }
    }

    /// Rebuilds the model and vocabulary stored in a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Vocab)> {
        let meta = &ckpt.meta;
        let vocab = Vocab::from_tokens(meta.vocab.clone()).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let config = meta.encoders.first().ok_or_else(|| Error::CorruptCheckpoint("no encoder config".into()))?.clone();
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "encoder vocab_size {} but {} vocabulary tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let shapes = expected_shapes(&config)?;
        let fill = |prefix: &str| -> Result<EncoderWeights> {
            shapes.try_map(prefix, &mut |name, shape| {
                let values = ckpt.array(name).ok_or_else(|| Error::CorruptCheckpoint(format!("missing array {name}")))?;
                Tensor::new(shape.clone(), values.to_vec()).map_err(|_| Error::CorruptCheckpoint(format!("array {name} has wrong length")))
            })
        };
        let get = |name: &str, shape: Vec<usize>| -> Result<Tensor> {
            let values = ckpt.array(name).ok_or_else(|| Error::CorruptCheckpoint(format!("missing array {name}")))?;
            Tensor::new(shape, values.to_vec()).map_err(|_| Error::CorruptCheckpoint(format!("array {name} has wrong length")))
        };
        let model = match meta.kind {
            ArchitectureKind::Mono => QEModel::Mono(MonoModel {
                encoder: fill("encoder.")?,
                pooling: meta.pooling,
                head_weight: get("head.weight", vec![config.d_model, 1])?,
                head_bias: get("head.bias", vec![1])?,
                output_map: meta.output_map,
                config,
            }),
            ArchitectureKind::Siamese => QEModel::Siamese(SiameseModel {
                encoder_a: fill("encoder_a.")?,
                encoder_b: if meta.share_weights { None } else { Some(fill("encoder_b.")?) },
                pooling: meta.pooling,
                output_map: meta.output_map,
                config,
            }),
        };
        let expected = {
            let mut n = 0;
            model.visit_params(&mut |_, _| n += 1);
            n
        };
        if expected != ckpt.arrays.len() {
            return Err(Error::CorruptCheckpoint(format!("{} arrays, expected {expected}", ckpt.arrays.len())));
        }
        Ok((model, vocab))
    }
}

/// Mono prediction for one sequence (eval mode).
pub fn mono_predict(model: &MonoModel, seq: &TokenSequence) -> Result<f64> {
    QEModel::Mono(model.clone()).predict_raw(&EncodedInput::Mono(seq.clone()))
}

/// Cosine similarity of the pooled encodings of both sequences (eval mode).
pub fn siamese_predict(model: &SiameseModel, pair: (&TokenSequence, &TokenSequence)) -> Result<f64> {
    QEModel::Siamese(model.clone()).predict_raw(&EncodedInput::Siamese(pair.0.clone(), pair.1.clone()))
}

/// Mean of squared differences.
pub fn mse_loss(preds: &[f64], golds: &[f64]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: golds.len() });
    }
    if preds.is_empty() {
        return Err(Error::Empty);
    }
    Ok(preds.iter().zip(golds).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / preds.len() as f64)
}
