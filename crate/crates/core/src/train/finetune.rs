//! Epoch-based SGD fine-tuning on the target task with early stopping.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{make_batch, TaskSet, Utterance};
use crate::error::{Error, Result};
use crate::models::{ModelKind, SeqModel, Split};
use crate::params::{backward, sgd_step, ParamSet};

use super::state::TrainState;

/// Mean token negative log-likelihood of `params` over `utts`, evaluated in
/// chunks of `batch_size`.
pub fn mean_nll<M: SeqModel + ?Sized>(model: &M, params: &ParamSet, utts: &[&Utterance], batch_size: usize) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::Setup("cannot evaluate on an empty split".into()));
    }
    let with_features = model.kind() == ModelKind::Transducer;
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in utts.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk, with_features, Split::Val)?;
        let tape = Tape::new();
        let vars = params.to_constants(&tape);
        let (nll, n) = model.nll_sum(&tape, &vars, &batch)?;
        total += nll.value().item();
        count += n;
    }
    let mean = total / count as f64;
    if !mean.is_finite() {
        return Err(Error::Numeric { op: "mean_nll".into() });
    }
    Ok(mean)
}

/// Learning-rate and stopping policy for [`run_schedule`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    /// Multiplier applied to the learning rate after a non-improving epoch.
    pub decay: f64,
    /// Stop once this many consecutive epochs fail to improve.
    pub stop_after: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
}

impl Schedule {
    /// Plain early stopping: constant learning rate, stop after the first
    /// `patience + 1` non-improving epochs in a row.
    pub fn early_stop(lr: f64, patience: usize, max_epochs: usize, batch_size: usize) -> Self {
        Self {
            lr,
            decay: 1.0,
            stop_after: patience + 1,
            max_epochs,
            batch_size,
        }
    }

    /// SGD from 1.0, ×0.25 per non-improving epoch, stop after 5 in a row.
    pub fn lm(max_epochs: usize, batch_size: usize) -> Self {
        Self {
            lr: 1.0,
            decay: 0.25,
            stop_after: 5,
            max_epochs,
            batch_size,
        }
    }
}

/// Schedule bookkeeping, separated from training so it can be checked alone.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleTracker {
    pub lr: f64,
    pub best: f64,
    pub streak: usize,
    decay: f64,
    stop_after: usize,
}

impl ScheduleTracker {
    pub fn new(schedule: &Schedule, initial_val: f64) -> Self {
        Self {
            lr: schedule.lr,
            best: initial_val,
            streak: 0,
            decay: schedule.decay,
            stop_after: schedule.stop_after,
        }
    }

    /// Records one epoch's validation loss; returns `(improved, stop)`.
    pub fn observe(&mut self, val: f64) -> (bool, bool) {
        if val < self.best {
            self.best = val;
            self.streak = 0;
            (true, false)
        } else {
            self.streak += 1;
            self.lr *= self.decay;
            (false, self.streak >= self.stop_after)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    /// State holding the best-validation parameters seen, including the
    /// starting point.
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
    pub initial_val: f64,
}

/// SGD epochs over `train`, validating on `val` after each, under `schedule`.
/// Returns the best-validation checkpoint rather than the last one.
pub fn run_schedule<M: SeqModel + ?Sized>(
    state: &TrainState,
    train: &[&Utterance],
    val: &[&Utterance],
    schedule: &Schedule,
    model: &M,
) -> Result<FineTuneOutcome> {
    if train.is_empty() {
        return Err(Error::Setup("fine-tuning needs a non-empty target training split".into()));
    }
    if val.is_empty() {
        return Err(Error::Setup("fine-tuning needs a non-empty target validation split".into()));
    }
    if train.iter().any(|u| u.features.is_none()) && model.kind() == ModelKind::Transducer {
        return Err(Error::Setup("transducer fine-tuning needs features".into()));
    }
    let with_features = model.kind() == ModelKind::Transducer;
    let eval_bs = schedule.batch_size.max(16);
    let initial_val = mean_nll(model, &state.params, val, eval_bs)?;
    let mut tracker = ScheduleTracker::new(schedule, initial_val);
    let mut rng = state.rng.clone();
    let mut params = state.params.clone();
    let mut best = state.params.clone();
    let mut history = vec![];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=schedule.max_epochs {
        let lr = tracker.lr;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(schedule.batch_size.max(1)) {
            let utts: Vec<&Utterance> = chunk.iter().map(|&i| train[i]).collect();
            let batch = make_batch(&utts, with_features, Split::Train)?;
            let tape = Tape::new();
            let vars = params.to_vars(&tape);
            let loss = model.loss(&tape, &vars, &batch)?;
            loss_sum += loss.value().item();
            steps += 1;
            let g = backward(&tape, loss, &vars)?;
            params = sgd_step(&params, &g, lr)?;
        }
        let val_loss = mean_nll(model, &params, val, eval_bs)?;
        let (improved, stop) = tracker.observe(val_loss);
        if improved {
            best = params.clone();
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / steps as f64,
            val_loss,
            improved,
        });
        log::info!("fine-tune epoch {epoch}: lr {lr:.3e} train {:.4} val {val_loss:.4}", loss_sum / steps as f64);
        if stop {
            break;
        }
    }
    let mut out = state.clone();
    out.params = best;
    out.rng = rng;
    out.best_val = Some(tracker.best);
    out.patience_used = tracker.streak;
    Ok(FineTuneOutcome {
        state: out,
        history,
        initial_val,
    })
}

/// Fine-tunes on the target task's train split with plain early stopping.
pub fn fine_tune<M: SeqModel + ?Sized>(
    state: &TrainState,
    set: &TaskSet,
    schedule: &Schedule,
    model: &M,
) -> Result<FineTuneOutcome> {
    let target = set.target()?;
    let train: Vec<&Utterance> = target.train.iter().collect();
    let val: Vec<&Utterance> = target.val.iter().collect();
    run_schedule(state, &train, &val, schedule, model)
}

/// The language-model fine-tuning schedule on the target task.
pub fn lm_fine_tune_schedule<M: SeqModel + ?Sized>(
    state: &TrainState,
    set: &TaskSet,
    max_epochs: usize,
    batch_size: usize,
    model: &M,
) -> Result<FineTuneOutcome> {
    if model.kind() != ModelKind::Lm {
        return Err(Error::Setup("the LM schedule applies to language models only".into()));
    }
    fine_tune(state, set, &Schedule::lm(max_epochs, batch_size), model)
}
