//! Fine-tuning loop: mini-batch Adam with linear warmup, periodic evaluation
//! on a held-out split, patience-based early stopping and best-model
//! retention.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_train_eval, QEPair, Vocab};
use crate::encoder::{Checkpoint, Mode, TrainingMeta};
use crate::error::{Error, Result};
use crate::models::{mse_loss, EncodedInput, OutputMap, QEModel};
use crate::numerics::{adam_step, lr_at, AdamState, LrSchedule, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub eval_fraction: f64,
    pub patience_rounds: usize,
    pub eval_every_steps: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Train against z-scores mapped affinely onto `[-1, 1]` (using the
    /// training split's range); predictions are mapped back.
    pub rescale_targets: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            peak_lr: 2e-5,
            warmup_fraction: 0.1,
            epochs: 3,
            eval_fraction: 0.2,
            patience_rounds: 10,
            eval_every_steps: 100,
            seed: 42,
            shuffle: true,
            rescale_targets: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction must lie in (0, 1), got {}", self.warmup_fraction));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad(format!("eval_fraction must lie in (0, 1), got {}", self.eval_fraction));
        }
        if self.patience_rounds == 0 {
            return bad("patience_rounds must be at least 1".into());
        }
        if self.eval_every_steps == 0 {
            return bad("eval_every_steps must be at least 1".into());
        }
        Ok(())
    }

    /// Optimizer steps per epoch for `n_train` examples; the short last
    /// batch is kept.
    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochsExhausted,
    EarlyStopped,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::EpochsExhausted => "epochs_exhausted",
            StopReason::EarlyStopped => "early_stopped",
        })
    }
}

/// One evaluation round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRound {
    /// 1-based.
    pub round: usize,
    pub step: usize,
    /// Mean training loss over the steps since the previous round.
    pub train_loss: f64,
    pub eval_loss: f64,
    /// Best eval loss up to and including this round.
    pub best: f64,
}

impl EvalRound {
    pub fn log_line(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}", self.round, self.step, self.train_loss, self.eval_loss, self.best)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub step_losses: Vec<f64>,
    /// Learning rate applied at each step.
    pub step_lrs: Vec<f64>,
    pub rounds: Vec<EvalRound>,
    pub best_eval_loss: f64,
    /// 1-based round that produced `best_eval_loss`.
    pub best_round: usize,
    pub stop_reason: StopReason,
    pub epochs_run: usize,
    pub schedule: LrSchedule,
}

impl TrainingHistory {
    pub fn eval_losses(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.eval_loss).collect()
    }

    pub fn steps_run(&self) -> usize {
        self.step_losses.len()
    }

    pub fn should_stop(&self, patience: usize) -> bool {
        should_stop(&self.eval_losses(), patience)
    }
}

/// True when none of the last `patience` eval losses beats the best loss
/// recorded before them.
pub fn should_stop(eval_losses: &[f64], patience: usize) -> bool {
    let n = eval_losses.len();
    if patience == 0 || n <= patience {
        return false;
    }
    let (before, recent) = eval_losses.split_at(n - patience);
    let best_before = before.iter().copied().fold(f64::INFINITY, f64::min);
    recent.iter().all(|&l| l >= best_before)
}

/// MSE of eval-mode z-space predictions against `golds`.
pub fn evaluate_loss(model: &QEModel, inputs: &[EncodedInput], golds: &[f64]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Empty);
    }
    let preds = model.predict_batch(inputs)?;
    let loss = mse_loss(&preds, golds)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteValue("eval loss".into()));
    }
    Ok(loss)
}

/// Encodes QE pairs and evaluates the z-space MSE.
pub fn evaluate_pairs(model: &QEModel, vocab: &Vocab, pairs: &[QEPair]) -> Result<f64> {
    let inputs: Vec<EncodedInput> = pairs.iter().map(|p| model.encode_input(p, vocab)).collect();
    let golds: Vec<f64> = pairs.iter().map(|p| p.z_score).collect();
    evaluate_loss(model, &inputs, &golds)
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Weights with the lowest eval loss.
    pub model: QEModel,
    pub checkpoint: Checkpoint,
    pub history: TrainingHistory,
}

/// Trains a copy of `model` and returns the best checkpoint with its history.
pub fn train(model: &QEModel, vocab: &Vocab, data: &[QEPair], cfg: &TrainingConfig) -> Result<(Checkpoint, TrainingHistory)> {
    let out = train_with_log(model, vocab, data, cfg, &mut |_| {})?;
    Ok((out.checkpoint, out.history))
}

/// [`train`], reporting every evaluation round to `on_round`.
pub fn train_with_log(
    model: &QEModel,
    vocab: &Vocab,
    data: &[QEPair],
    cfg: &TrainingConfig,
    on_round: &mut dyn FnMut(&EvalRound),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let need = 2 * cfg.batch_size;
    if data.len() < need {
        return Err(Error::TooFewExamples { have: data.len(), need });
    }
    let (train_set, eval_set) = split_train_eval(data, cfg.eval_fraction, cfg.seed)?;

    let mut model = model.clone();
    let output_map = if cfg.rescale_targets {
        let (lo, hi) = train_set
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.z_score), hi.max(p.z_score)));
        Some(OutputMap::unit_interval(lo, hi)?)
    } else {
        None
    };
    model.set_output_map(output_map);

    let train_inputs: Vec<EncodedInput> = train_set.iter().map(|p| model.encode_input(p, vocab)).collect();
    let train_targets: Vec<f64> =
        train_set.iter().map(|p| output_map.map_or(p.z_score, |m| m.to_raw(p.z_score))).collect();
    let eval_inputs: Vec<EncodedInput> = eval_set.iter().map(|p| model.encode_input(p, vocab)).collect();
    let eval_golds: Vec<f64> = eval_set.iter().map(|p| p.z_score).collect();

    let steps_per_epoch = cfg.steps_per_epoch(train_set.len());
    let schedule = LrSchedule::with_warmup_fraction(cfg.peak_lr, cfg.warmup_fraction, cfg.epochs * steps_per_epoch)?;
    let mut adam = AdamState::with_defaults(&model.param_sizes());

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dropout_seed = cfg.seed ^ 0x9E37_79B9_7F4A_7C15;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = TrainingHistory {
        step_losses: Vec::with_capacity(schedule.total_steps),
        step_lrs: Vec::with_capacity(schedule.total_steps),
        rounds: Vec::new(),
        best_eval_loss: f64::INFINITY,
        best_round: 0,
        stop_reason: StopReason::EpochsExhausted,
        epochs_run: 0,
        schedule,
    };
    let mut best_model = model.clone();
    let mut step = 0usize;
    let mut since_round = 0usize;
    let mut examples_seen = 0u64;

    'epochs: for _ in 0..cfg.epochs {
        history.epochs_run += 1;
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let lr = lr_at(&schedule, step)?;
            let (loss, grads) =
                batch_gradients(&model, &train_inputs, &train_targets, batch, dropout_seed, examples_seen)?;
            examples_seen += batch.len() as u64;
            let mut params: Vec<&mut Tensor> = Vec::new();
            model.visit_params_mut(&mut |_, t| params.push(t));
            adam_step(&mut params, &grads, &mut adam, lr)?;
            history.step_losses.push(loss);
            history.step_lrs.push(lr);
            since_round += 1;

            let epoch_end = b + 1 == steps_per_epoch;
            if step.is_multiple_of(cfg.eval_every_steps) || epoch_end {
                let eval_loss = evaluate_loss(&model, &eval_inputs, &eval_golds)?;
                let recent = &history.step_losses[history.step_losses.len() - since_round..];
                let train_loss = recent.iter().sum::<f64>() / recent.len() as f64;
                since_round = 0;
                if eval_loss < history.best_eval_loss {
                    history.best_eval_loss = eval_loss;
                    history.best_round = history.rounds.len() + 1;
                    best_model = model.clone();
                }
                let round = EvalRound {
                    round: history.rounds.len() + 1,
                    step,
                    train_loss,
                    eval_loss,
                    best: history.best_eval_loss,
                };
                on_round(&round);
                history.rounds.push(round);
                if history.should_stop(cfg.patience_rounds) {
                    history.stop_reason = StopReason::EarlyStopped;
                    break 'epochs;
                }
            }
        }
    }

    let meta = TrainingMeta {
        seed: cfg.seed,
        epochs_run: history.epochs_run,
        steps_run: step,
        best_eval_loss: Some(history.best_eval_loss),
    };
    let checkpoint = best_model.to_checkpoint(vocab, meta);
    Ok(TrainOutput { model: best_model, checkpoint, history })
}

/// Mean batch loss and its gradient for every parameter, in
/// [`QEModel::visit_params`] order. Examples run in parallel on separate
/// tapes; their gradients are summed in batch order.
fn batch_gradients(
    model: &QEModel,
    inputs: &[EncodedInput],
    targets: &[f64],
    batch: &[usize],
    dropout_seed: u64,
    first_example: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let scale = 1.0 / batch.len() as f64;
    let per_example: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .enumerate()
        .map(|(j, &i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            rng.set_stream(first_example + j as u64);
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, true);
            let pred = model.forward(&mut tape, &vars, &inputs[i], &mut Mode::Train(&mut rng))?;
            let pred = tape.reshape(pred, vec![1])?;
            let loss = tape.mse(pred, &[targets[i]])?;
            let loss = tape.scale(loss, scale)?;
            let grads = tape.backward(loss)?;
            let value = tape.value(loss).item().expect("scalar loss");
            Ok((value, vars.to_vec().into_iter().map(|v| grads.get_or_zeros(v)).collect()))
        })
        .collect::<Result<_>>()?;

    let mut iter = per_example.into_iter();
    let (mut loss, mut total) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in total.iter_mut().zip(&g) {
            let sum: Vec<f64> = acc.data().iter().zip(gi.data()).map(|(a, b)| a + b).collect();
            acc.set_data(sum)?;
        }
    }
    Ok((loss, total))
}
