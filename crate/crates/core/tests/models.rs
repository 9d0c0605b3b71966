use proptest::prelude::*;
use qe_core::data::TokenSequence;
use qe_core::encoder::{encode, Checkpoint, EncoderConfig, TrainingMeta};
use qe_core::models::{mse_loss, pool, siamese_predict, EncodedInput, PoolingStrategy, QEModel};
use qe_core::numerics::{Tape, Tensor};

fn config(seed: u64) -> EncoderConfig {
    EncoderConfig { vocab_size: 25, d_model: 12, n_layers: 2, n_heads: 3, d_ff: 24, max_len: 32, dropout_rate: 0.1, seed }
}

fn sequence(ids: &[usize]) -> TokenSequence {
    TokenSequence { token_ids: ids.to_vec(), segment_ids: vec![0; ids.len()], attention_mask: vec![1; ids.len()] }
}

fn ids() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(4usize..25, 1..15)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn siamese_output_is_bounded(a in ids(), b in ids(), seed in 0u64..50, share in any::<bool>()) {
        let QEModel::Siamese(m) = QEModel::siamese(config(seed), PoolingStrategy::Mean, share).unwrap() else { unreachable!() };
        let r = siamese_predict(&m, (&sequence(&a), &sequence(&b))).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn shared_siamese_is_symmetric(a in ids(), b in ids(), seed in 0u64..50) {
        let QEModel::Siamese(m) = QEModel::siamese(config(seed), PoolingStrategy::Mean, true).unwrap() else { unreachable!() };
        let (sa, sb) = (sequence(&a), sequence(&b));
        let ab = siamese_predict(&m, (&sa, &sb)).unwrap();
        let ba = siamese_predict(&m, (&sb, &sa)).unwrap();
        prop_assert!((ab - ba).abs() < 1e-10);
    }

    #[test]
    fn cosine_ignores_common_positive_scale(a in ids(), b in ids(), c in 0.01f64..100.0) {
        let cfg = config(1);
        let QEModel::Siamese(m) = QEModel::siamese(cfg.clone(), PoolingStrategy::Mean, false).unwrap() else { unreachable!() };
        let (sa, sb) = (sequence(&a), sequence(&b));
        let ha = encode(&m.encoder_a, &cfg, &sa).unwrap();
        let hb = encode(m.encoder_b.as_ref().unwrap(), &cfg, &sb).unwrap();
        let scaled = |h: &Tensor| Tensor::new(h.shape().to_vec(), h.data().iter().map(|v| v * c).collect()).unwrap();
        let u = pool(&ha, &sa.attention_mask, PoolingStrategy::Mean).unwrap();
        let v = pool(&hb, &sb.attention_mask, PoolingStrategy::Mean).unwrap();
        let us = pool(&scaled(&ha), &sa.attention_mask, PoolingStrategy::Mean).unwrap();
        let vs = pool(&scaled(&hb), &sb.attention_mask, PoolingStrategy::Mean).unwrap();
        let direct = siamese_predict(&m, (&sa, &sb)).unwrap();
        prop_assert!((cosine(u.data(), v.data()) - direct).abs() < 1e-10);
        prop_assert!((cosine(us.data(), vs.data()) - direct).abs() < 1e-10);
    }

    #[test]
    fn max_pool_dominates_mean_pool(rows in 1usize..8, data in prop::collection::vec(-10.0f64..10.0, 8 * 4), mask_bits in prop::collection::vec(any::<bool>(), 8)) {
        let h = Tensor::new(vec![rows, 4], data[..rows * 4].to_vec()).unwrap();
        let mut mask: Vec<u8> = mask_bits[..rows].iter().map(|&b| u8::from(b)).collect();
        mask[0] = 1;
        let mx = pool(&h, &mask, PoolingStrategy::Max).unwrap();
        let mn = pool(&h, &mask, PoolingStrategy::Mean).unwrap();
        for (a, b) in mx.data().iter().zip(mn.data()) {
            prop_assert!(a + 1e-12 >= *b);
        }
    }

    #[test]
    fn mse_is_zero_only_on_equality(p in prop::collection::vec(-5.0f64..5.0, 1..30), bump in prop::option::of((0usize..30, 0.001f64..1.0))) {
        let mut g = p.clone();
        if let Some((i, d)) = bump {
            g[i % p.len()] += d;
        }
        let l = mse_loss(&p, &g).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, bump.is_none());
    }
}

#[test]
fn checkpoint_roundtrip_gives_bit_identical_predictions() {
    let vocab = qe_core::data::build_vocab(&(0..21).map(|i| format!("t{i}")).collect::<Vec<_>>(), 25).unwrap();
    for model in [QEModel::mono_default(config(4)).unwrap(), QEModel::siamese_default(config(4)).unwrap()] {
        let bytes = model.to_checkpoint(&vocab, TrainingMeta::default()).to_bytes().unwrap();
        let (back, _) = QEModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        let inputs: Vec<EncodedInput> = (0..100)
            .map(|k| {
                let a: Vec<usize> = (0..3 + k % 7).map(|i| 4 + (i * 7 + k) % 21).collect();
                let b: Vec<usize> = (0..2 + k % 5).map(|i| 4 + (i * 3 + k * 5) % 21).collect();
                match model {
                    QEModel::Mono(_) => EncodedInput::Mono(sequence(&[a, b].concat())),
                    QEModel::Siamese(_) => EncodedInput::Siamese(sequence(&a), sequence(&b)),
                }
            })
            .collect();
        let before = model.predict_batch(&inputs).unwrap();
        let after = back.predict_batch(&inputs).unwrap();
        assert!(before.iter().zip(&after).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn batch_prediction_preserves_order() {
    let m = QEModel::mono_default(config(9)).unwrap();
    let inputs: Vec<EncodedInput> = (0..40).map(|k| EncodedInput::Mono(sequence(&[0, 4 + k % 20, 1]))).collect();
    let batch = m.predict_batch(&inputs).unwrap();
    for (x, out) in inputs.iter().zip(batch) {
        assert_eq!(m.predict(x).unwrap().to_bits(), out.to_bits());
    }
}

#[test]
fn gradients_reach_every_parameter() {
    let m = QEModel::siamese_default(config(2)).unwrap();
    let mut tape = Tape::new();
    let vars = m.register(&mut tape, true);
    let input = EncodedInput::Siamese(sequence(&[0, 5, 6, 1]), sequence(&[0, 7, 8, 9, 1]));
    let out = m.forward(&mut tape, &vars, &input, &mut qe_core::encoder::Mode::Eval).unwrap();
    let grads = tape.backward(out).unwrap();
    let touched = vars.to_vec().iter().filter(|&&v| grads.get(v).is_some()).count();
    assert_eq!(touched, vars.to_vec().len());
}
