use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::data::{Clip, ClipBatch};
use crate::error::{Error, Result};
use crate::metrics::{binarize, per_au_f1, AuLabelFrame, PerAuF1, Prediction};
use crate::model::AuModel;
use crate::tensor::{Element, Tensor};

use super::{focal_loss, sgd_step, FocalLossConfig, OptimizerState, SchedulerState};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Frames per clip.
    pub seq_len: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Seeds parameter initialization and batch order.
    pub seed: u64,
    /// Evaluate (and checkpoint) every this many steps; 0 disables.
    pub eval_every: usize,
    /// Restricts work to one thread so runs are bit-reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { seq_len: 32, batch_size: 2, max_steps: 500, seed: 0, eval_every: 100, deterministic: true }
    }
}

impl TrainConfig {
    pub fn validate(&self, tubelet_t: usize) -> Result<()> {
        if self.seq_len == 0 || tubelet_t == 0 || !self.seq_len.is_multiple_of(tubelet_t) {
            return Err(Error::config(format!(
                "seq_len {} must be a positive multiple of the tubelet length {tubelet_t}",
                self.seq_len
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub macro_f1: Option<f64>,
}

/// Per-step training log, serialized as `step,loss,lr[,macro_f1]` lines.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub records: Vec<HistoryRecord>,
}

impl History {
    pub fn to_text(&self) -> String {
        let mut out = String::from("step,loss,lr,macro_f1\n");
        for r in &self.records {
            write!(out, "{},{},{}", r.step, r.loss, r.lr).unwrap();
            if let Some(f) = r.macro_f1 {
                write!(out, ",{f}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let bad = |msg: String| Error::parse("<history>", i + 1, msg);
            let cells: Vec<&str> = line.split(',').collect();
            if !(3..=4).contains(&cells.len()) {
                return Err(bad(format!("expected 3 or 4 fields, got {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            records.push(HistoryRecord {
                step: cells[0].parse().map_err(|e| bad(format!("step: {e}")))?,
                loss: num(cells[1])?,
                lr: num(cells[2])?,
                macro_f1: cells.get(3).map(|s| num(s)).transpose()?,
            });
        }
        Ok(History { records })
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Everything a training run needs besides the model.
pub struct TrainSetup<'a, F: Element> {
    pub config: &'a TrainConfig,
    pub focal: &'a FocalLossConfig,
    pub scheduler: &'a mut SchedulerState,
    pub optimizer: &'a mut OptimizerState<F>,
    /// Clips scored at each evaluation point.
    pub eval_clips: Option<&'a [Clip]>,
    pub threshold: f64,
}

/// Runs SGD over shuffled clip batches for `max_steps` steps.
///
/// `on_eval` is called after every evaluation point (e.g. to write a checkpoint).
pub fn train_loop<F: Element>(
    model: &mut AuModel<F>,
    clips: &[Clip],
    setup: TrainSetup<'_, F>,
    mut on_eval: impl FnMut(usize, &AuModel<F>, Option<f64>) -> Result<()>,
) -> Result<History> {
    let cfg = setup.config;
    cfg.validate(model.cfg.tubelet.t)?;
    if clips.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut history = History::default();
    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(clips.len()) {
            if order.is_empty() {
                order = (0..clips.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(&clips[order.pop().expect("refilled above")]);
        }
        let batch = ClipBatch::from_clips(&batch)?;
        let lr = setup.scheduler.advance().0;
        setup.optimizer.lr = lr;

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let x = tape.constant(batch.frames.cast());
        let logits = model.forward(&mut tape, &bound, x)?;
        let loss = match focal_loss(&mut tape, logits, &batch.labels, setup.focal) {
            // Every entry of this batch is unannotated: nothing to learn from.
            Err(Error::EmptyBatch) => {
                history.records.push(HistoryRecord { step, loss: 0.0, lr, macro_f1: None });
                continue;
            }
            other => other?,
        };
        let loss_value = tape.item(loss).as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { step, detail: format!("loss = {loss_value}") });
        }
        let grads = tape.backward(loss)?;
        model.params.absorb(&grads, &bound)?;
        sgd_step(&mut model.params, setup.optimizer)?;

        let mut record = HistoryRecord { step, loss: loss_value, lr, macro_f1: None };
        if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            if let Some(eval) = setup.eval_clips {
                record.macro_f1 = Some(evaluate(model, eval, setup.threshold)?.macro_f1());
            }
            on_eval(step, model, record.macro_f1)?;
        }
        history.records.push(record);
    }
    Ok(history)
}

/// Probabilities `[T, 12]` for each clip, one forward pass per clip.
pub fn predict_clips<F: Element>(model: &AuModel<F>, clips: &[Clip]) -> Result<Vec<Tensor<F>>> {
    clips
        .iter()
        .map(|c| {
            let mut shape = vec![1];
            shape.extend_from_slice(c.frames.shape());
            let p = model.predict_proba(&c.frames.cast::<F>().reshaped(&shape)?)?;
            p.reshaped(&p.shape()[1..])
        })
        .collect()
}

/// Pools hard predictions and labels of all real (unpadded) frames.
pub fn pool_frames<F: Element>(clips: &[Clip], probs: &[Tensor<F>], threshold: f64) -> Result<(Vec<Prediction>, Vec<AuLabelFrame>)> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (c, p) in clips.iter().zip(probs) {
        let hard = binarize(p, threshold)?;
        for ((h, l), pad) in hard.into_iter().zip(&c.labels).zip(&c.padding) {
            if !pad {
                preds.push(h);
                labels.push(*l);
            }
        }
    }
    Ok((preds, labels))
}

/// Per-AU F1 of the model over all real frames of `clips`.
pub fn evaluate<F: Element>(model: &AuModel<F>, clips: &[Clip], threshold: f64) -> Result<PerAuF1> {
    let probs = predict_clips(model, clips)?;
    let (preds, labels) = pool_frames(clips, &probs, threshold)?;
    per_au_f1(&preds, &labels)
}
