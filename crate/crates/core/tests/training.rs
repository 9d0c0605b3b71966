use qe_core::data::{build_vocab, split_train_eval, QEPair, Vocab};
use qe_core::encoder::EncoderConfig;
use qe_core::models::QEModel;
use qe_core::numerics::lr_at;
use qe_core::synthetic::{generate, SyntheticConfig};
use qe_core::trainer::{evaluate_pairs, train, train_with_log, StopReason, TrainingConfig};
use qe_core::Error;

fn small_task(n: usize) -> (Vec<QEPair>, Vocab) {
    let (pairs, _) = generate(&SyntheticConfig { n_pairs: n, n_words: 40, n_common: 12, min_len: 3, max_len: 6, ..Default::default() }).unwrap();
    let texts: Vec<&str> = pairs.iter().flat_map(|p| [p.original.as_str(), p.translation.as_str()]).collect();
    let vocab = build_vocab(&texts, 100).unwrap();
    (pairs, vocab)
}

fn tiny(vocab: &Vocab) -> EncoderConfig {
    EncoderConfig { vocab_size: vocab.len(), d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_len: 24, dropout_rate: 0.1, seed: 1 }
}

fn cfg() -> TrainingConfig {
    TrainingConfig { batch_size: 4, peak_lr: 1e-3, epochs: 2, eval_every_steps: 5, ..Default::default() }
}

#[test]
fn history_and_schedule_contract() {
    let (data, vocab) = small_task(60);
    let out = train_with_log(&QEModel::mono_default(tiny(&vocab)).unwrap(), &vocab, &data, &cfg(), &mut |_| {}).unwrap();
    let h = &out.history;
    let n_train: usize = 60 - 12;
    let bound = 2 * n_train.div_ceil(4);
    assert!(h.steps_run() <= bound);
    assert_eq!(h.schedule.total_steps, bound);
    assert_eq!(h.schedule.warmup_steps, (0.1 * bound as f64).round() as usize);
    for (i, &lr) in h.step_lrs.iter().enumerate() {
        assert_eq!(lr.to_bits(), lr_at(&h.schedule, i + 1).unwrap().to_bits());
    }
    let losses = h.eval_losses();
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(h.best_eval_loss, min);
    assert_eq!(losses[h.best_round - 1], min);
    assert!(h.rounds.windows(2).all(|w| w[0].round < w[1].round && w[0].step < w[1].step));
    assert!(h.rounds.windows(2).all(|w| w[1].best <= w[0].best));
    assert!(h.epochs_run <= 2);

    // The returned weights reproduce the best eval loss.
    let (_, eval) = split_train_eval(&data, 0.2, cfg().seed).unwrap();
    assert!((evaluate_pairs(&out.model, &vocab, &eval).unwrap() - h.best_eval_loss).abs() < 1e-10);
}

#[test]
fn repeat_runs_are_bit_identical() {
    let (data, vocab) = small_task(48);
    for model in [QEModel::mono_default(tiny(&vocab)).unwrap(), QEModel::siamese_default(tiny(&vocab)).unwrap()] {
        let (c1, h1) = train(&model, &vocab, &data, &cfg()).unwrap();
        let (c2, h2) = train(&model, &vocab, &data, &cfg()).unwrap();
        assert_eq!(c1.to_bytes().unwrap(), c2.to_bytes().unwrap());
        assert_eq!(h1, h2);
    }
}

#[test]
fn unbounded_patience_runs_every_epoch() {
    let (data, vocab) = small_task(40);
    let c = TrainingConfig { patience_rounds: usize::MAX, epochs: 3, ..cfg() };
    let (_, h) = train(&QEModel::mono_default(tiny(&vocab)).unwrap(), &vocab, &data, &c).unwrap();
    assert_eq!(h.stop_reason, StopReason::EpochsExhausted);
    assert_eq!(h.epochs_run, 3);
    assert_eq!(h.steps_run(), 3 * 32usize.div_ceil(4));
}

#[test]
fn patience_one_stops_on_first_non_improvement() {
    let (data, vocab) = small_task(40);
    let c = TrainingConfig { patience_rounds: 1, epochs: 20, eval_every_steps: 1, peak_lr: 0.5, ..cfg() };
    let (_, h) = train(&QEModel::mono_default(tiny(&vocab)).unwrap(), &vocab, &data, &c).unwrap();
    assert_eq!(h.stop_reason, StopReason::EarlyStopped);
    let l = h.eval_losses();
    let n = l.len();
    assert!(l[n - 1] >= l[..n - 1].iter().cloned().fold(f64::INFINITY, f64::min));
}

#[test]
fn rejects_too_few_rows_and_bad_config() {
    let (data, vocab) = small_task(20);
    let m = QEModel::mono_default(tiny(&vocab)).unwrap();
    let c = TrainingConfig { batch_size: 8, ..cfg() };
    assert!(matches!(train(&m, &vocab, &data[..15], &c), Err(Error::TooFewExamples { have: 15, need: 16 })));
    let c = TrainingConfig { batch_size: 0, ..cfg() };
    assert!(matches!(train(&m, &vocab, &data, &c), Err(Error::InvalidConfig(_))));
}

#[test]
fn zero_predictor_eval_loss_is_gold_variance() {
    let (data, vocab) = small_task(50);
    let QEModel::Mono(mut m) = QEModel::mono_default(tiny(&vocab)).unwrap() else { unreachable!() };
    m.head_weight = qe_core::numerics::Tensor::zeros(vec![8, 1]);
    let model = QEModel::Mono(m);
    let loss = evaluate_pairs(&model, &vocab, &data).unwrap();
    let var = data.iter().map(|p| p.z_score * p.z_score).sum::<f64>() / data.len() as f64;
    assert!((loss - var).abs() < 1e-12);
    assert!((loss - 1.0).abs() < 1e-10);
    assert_eq!(loss.to_bits(), evaluate_pairs(&model, &vocab, &data).unwrap().to_bits());
}

#[test]
fn rescaled_training_predicts_in_z_space() {
    let (data, vocab) = small_task(48);
    let c = TrainingConfig { rescale_targets: true, ..cfg() };
    let (ckpt, _) = train(&QEModel::siamese_default(tiny(&vocab)).unwrap(), &vocab, &data, &c).unwrap();
    let map = ckpt.meta.output_map.expect("map recorded");
    let (model, _) = QEModel::from_checkpoint(&ckpt).unwrap();
    assert_eq!(model.output_map(), Some(map));
    let raw = model.predict_raw(&model.encode_input(&data[0], &vocab)).unwrap();
    let z = model.predict(&model.encode_input(&data[0], &vocab)).unwrap();
    assert!((map.to_raw(z) - raw).abs() < 1e-12);
}
