//! Built-in consistency checks: finite-difference gradient checks of every
//! tape primitive and of both architectures, plus a Pearson cross-check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::TokenSequence;
use crate::encoder::{EncoderConfig, Mode};
use crate::error::Result;
use crate::eval::pearson;
use crate::models::{EncodedInput, PoolingStrategy, QEModel};
use crate::numerics::gradcheck::DEFAULT_EPS;
use crate::numerics::{gradient_check_many, Tape, Tensor, Var};

/// Gradient checks pass below this relative error.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Probe step for whole-model checks. Freshly initialized embeddings are
/// small, so the first layer norm is steep and the central-difference
/// truncation error at the default step sits near 1e-4.
pub const ARCHITECTURE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("finite")
}

/// Reduces `v` to a scalar through a fixed random weighting so every output
/// coordinate gets a distinct upstream gradient.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let w = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    let w = tape.constant(w);
    let prod = tape.mul(v, w)?;
    tape.sum(prod)
}

type Primitive = (&'static str, Vec<Vec<usize>>, fn(&mut Tape, &[Var]) -> Result<Var>);

fn primitives() -> Vec<Primitive> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("matmul_bt", vec![vec![3, 4], vec![2, 4]], |t, v| t.matmul_bt(v[0], v[1])),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |t, v| t.mul(v[0], v[1])),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v| t.add_row(v[0], v[1])),
        ("scale", vec![vec![2, 3]], |t, v| t.scale(v[0], -1.7)),
        ("mul_const", vec![vec![2, 2]], |t, v| t.mul_const(v[0], vec![0.5, -2.0, 3.0, 0.0])),
        ("reshape", vec![vec![2, 3]], |t, v| t.reshape(v[0], vec![3, 2])),
        ("softmax_rows", vec![vec![3, 5]], |t, v| t.softmax_rows(v[0])),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-12)),
        ("gelu", vec![vec![4, 3]], |t, v| t.gelu(v[0])),
        ("gather", vec![vec![5, 3]], |t, v| t.gather(v[0], &[4, 0, 4, 2])),
        ("slice_cols", vec![vec![3, 6]], |t, v| t.slice_cols(v[0], 2, 3)),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], |t, v| t.concat_cols(&[v[0], v[1], v[0]])),
        ("row", vec![vec![4, 3]], |t, v| t.row(v[0], 2)),
        ("weighted_row_sum", vec![vec![4, 3]], |t, v| t.weighted_row_sum(v[0], vec![0.25, 0.5, 0.0, 0.25])),
        ("masked_max_rows", vec![vec![4, 3]], |t, v| t.masked_max_rows(v[0], &[true, true, false, true])),
        ("cosine", vec![vec![5], vec![5]], |t, v| t.cosine(v[0], v[1])),
        ("sum", vec![vec![2, 3]], |t, v| t.sum(v[0])),
        ("stack", vec![vec![1], vec![1], vec![1]], |t, v| t.stack(v)),
        ("mse", vec![vec![4]], |t, v| t.mse(v[0], &[0.1, -0.3, 0.7, 0.0])),
    ]
}

/// One gradient check per differentiable tape primitive, at inputs drawn
/// from `seed`.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitives()
        .into_iter()
        .enumerate()
        .map(|(k, (name, shapes, op))| {
            let points: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let error = gradient_check_many(
                |tape, vars| {
                    let out = op(tape, vars)?;
                    project(tape, out, seed.wrapping_mul(31).wrapping_add(k as u64))
                },
                &points,
                DEFAULT_EPS,
            )?;
            Ok(CheckResult { name: name.to_string(), error, tolerance: GRADIENT_TOLERANCE })
        })
        .collect()
}

/// 2 layers, `d_model = 8`, 2 heads.
pub fn gradcheck_config() -> EncoderConfig {
    EncoderConfig { vocab_size: 12, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, max_len: 16, dropout_rate: 0.1, seed: 5 }
}

fn seq(ids: &[usize], segments: &[usize], real: usize) -> TokenSequence {
    let mask = (0..ids.len()).map(|i| u8::from(i < real)).collect();
    TokenSequence { token_ids: ids.to_vec(), segment_ids: segments.to_vec(), attention_mask: mask }
}

/// Squared-error loss of `model` on `input`, checked against finite
/// differences over every parameter.
pub fn model_check(name: &str, model: &QEModel, input: &EncodedInput, gold: f64, eps: f64) -> Result<CheckResult> {
    let error = gradient_check_many(
        |tape, vars| {
            let mv = model.bind(vars)?;
            let out = model.forward(tape, &mv, input, &mut Mode::Eval)?;
            let out = tape.reshape(out, vec![1])?;
            tape.mse(out, &[gold])
        },
        &model.param_tensors(),
        eps,
    )?;
    Ok(CheckResult { name: name.to_string(), error, tolerance: GRADIENT_TOLERANCE })
}

/// Gradient checks of both architectures at the toy size, inputs padded.
pub fn architecture_checks(eps: f64) -> Result<Vec<CheckResult>> {
    let cfg = gradcheck_config();
    let joint = seq(&[0, 5, 9, 1, 7, 4, 11, 1, 2, 2], &[0, 0, 0, 0, 1, 1, 1, 1, 0, 0], 8);
    let a = seq(&[0, 5, 9, 6, 1, 2], &[0; 6], 5);
    let b = seq(&[0, 7, 4, 11, 10, 8, 1], &[0; 7], 7);
    let mono_input = EncodedInput::Mono(joint);
    let siamese_input = EncodedInput::Siamese(a, b);
    let mut out = Vec::new();
    for pooling in [PoolingStrategy::Cls, PoolingStrategy::Mean, PoolingStrategy::Max] {
        let m = QEModel::mono(cfg.clone(), pooling)?;
        out.push(model_check(&format!("mono/{pooling}"), &m, &mono_input, 0.4, eps)?);
    }
    for (pooling, share) in [(PoolingStrategy::Mean, false), (PoolingStrategy::Mean, true), (PoolingStrategy::Cls, false)] {
        let m = QEModel::siamese(cfg.clone(), pooling, share)?;
        let name = format!("siamese/{pooling}{}", if share { "/shared" } else { "" });
        out.push(model_check(&name, &m, &siamese_input, 0.4, eps)?);
    }
    Ok(out)
}

/// Largest disagreement between [`pearson`] and the textbook
/// `cov / (sd_x * sd_y)` with sample moments, over random vectors.
pub fn pearson_cross_check(trials: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.gen_range(2..=200);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0)).collect();
        let nf = n as f64;
        let (mx, my) = (x.iter().sum::<f64>() / nf, y.iter().sum::<f64>() / nf);
        let cov = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (nf - 1.0);
        let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
        let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
        worst = worst.max((pearson(&x, &y)? - cov / (sx * sy)).abs());
    }
    Ok(CheckResult { name: "pearson".into(), error: worst, tolerance: 1e-12 })
}

/// Everything above, in order.
pub fn run_all() -> Result<Vec<CheckResult>> {
    let mut out = primitive_checks(17)?;
    out.extend(architecture_checks(ARCHITECTURE_EPS)?);
    out.push(pearson_cross_check(200, 3)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for c in primitive_checks(17).unwrap() {
            assert!(c.passed(), "{} error {}", c.name, c.error);
        }
    }

    #[test]
    fn bind_roundtrips_visit_order() {
        let m = QEModel::siamese(gradcheck_config(), PoolingStrategy::Mean, false).unwrap();
        let mut tape = Tape::new();
        let vars = m.register(&mut tape, true).to_vec();
        assert_eq!(m.bind(&vars).unwrap().to_vec(), vars);
        assert!(m.bind(&vars[1..]).is_err());
    }
}
