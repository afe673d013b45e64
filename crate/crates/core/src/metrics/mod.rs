//! Frame-level AU F1 scoring, K-fold partitioning and result reports.

mod report;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use report::{render_report, ComparisonRow, FoldOutcome, FoldReport, LITERATURE_ROWS};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::vivit::NUM_AUS;

pub const AU_NAMES: [&str; NUM_AUS] =
    ["AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26"];

pub const UNKNOWN: i8 = -1;

/// One frame's annotation: 1 present, 0 absent, −1 unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AuLabelFrame(pub [i8; NUM_AUS]);

impl AuLabelFrame {
    pub const UNKNOWN: AuLabelFrame = AuLabelFrame([UNKNOWN; NUM_AUS]);

    pub fn new(values: [i8; NUM_AUS]) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !matches!(v, -1..=1)) {
            return Err(Error::config(format!("AU label code {v} is not one of 0, 1, -1")));
        }
        Ok(AuLabelFrame(values))
    }

    pub fn get(&self, au: usize) -> i8 {
        self.0[au]
    }
}

impl Default for AuLabelFrame {
    fn default() -> Self {
        AuLabelFrame([0; NUM_AUS])
    }
}

/// Hard per-frame predictions (0/1 per AU).
pub type Prediction = [u8; NUM_AUS];

/// `1` where `p >= threshold`, for probabilities shaped `[T, 12]`.
pub fn binarize<F: Element>(probs: &Tensor<F>, threshold: f64) -> Result<Vec<Prediction>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::usage(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    if probs.shape().last() != Some(&NUM_AUS) {
        return Err(Error::dim(format!("probabilities must end in {NUM_AUS} AUs, got {:?}", probs.shape())));
    }
    Ok(probs
        .data()
        .chunks(NUM_AUS)
        .map(|row| std::array::from_fn(|i| u8::from(row[i].as_f64() >= threshold)))
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn annotated(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2TP / (2TP + FP + FN)`, or `None` when that denominator is zero.
    pub fn f1(&self) -> Option<f64> {
        let den = 2 * self.tp + self.fp + self.fn_;
        (den > 0).then(|| (2 * self.tp) as f64 / den as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerAuF1 {
    pub scores: [f64; NUM_AUS],
    /// No annotated frames, or no positives in predictions and labels; scored 0.
    pub undefined: [bool; NUM_AUS],
    pub confusion: [Confusion; NUM_AUS],
}

impl PerAuF1 {
    pub fn macro_f1(&self) -> f64 {
        self.scores.iter().sum::<f64>() / NUM_AUS as f64
    }
}

impl fmt::Display for PerAuF1 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, name) in AU_NAMES.iter().enumerate() {
            let flag = if self.undefined[i] { " (undefined)" } else { "" };
            writeln!(f, "{name:<5} {:.4}{flag}", self.scores[i])?;
        }
        write!(f, "macro {:.4}", self.macro_f1())
    }
}

pub fn confusion_counts(preds: &[Prediction], labels: &[AuLabelFrame]) -> Result<[Confusion; NUM_AUS]> {
    if preds.len() != labels.len() {
        return Err(Error::dim(format!("{} predictions for {} label frames", preds.len(), labels.len())));
    }
    let mut c = [Confusion::default(); NUM_AUS];
    for (p, l) in preds.iter().zip(labels) {
        for au in 0..NUM_AUS {
            let cell = &mut c[au];
            match (p[au], l.0[au]) {
                (_, UNKNOWN) => {}
                (1, 1) => cell.tp += 1,
                (1, _) => cell.fp += 1,
                (_, 1) => cell.fn_ += 1,
                _ => cell.tn += 1,
            }
        }
    }
    Ok(c)
}

/// Per-AU F1 over pooled frames; unknown labels are skipped per AU.
pub fn per_au_f1(preds: &[Prediction], labels: &[AuLabelFrame]) -> Result<PerAuF1> {
    let confusion = confusion_counts(preds, labels)?;
    let mut scores = [0.0; NUM_AUS];
    let mut undefined = [false; NUM_AUS];
    for au in 0..NUM_AUS {
        match confusion[au].f1() {
            Some(f) if confusion[au].annotated() > 0 => scores[au] = f,
            _ => undefined[au] = true,
        }
    }
    Ok(PerAuF1 { scores, undefined, confusion })
}

/// Mean of the 12 per-AU F1 scores.
pub fn macro_f1(preds: &[Prediction], labels: &[AuLabelFrame]) -> Result<f64> {
    Ok(per_au_f1(preds, labels)?.macro_f1())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub id: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Seeded video-level partition into `k` folds whose sizes differ by at most one.
pub fn kfold_split(video_ids: &[String], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::config(format!("k-fold needs k >= 2, got {k}")));
    }
    if video_ids.len() < k {
        return Err(Error::config(format!("{} videos cannot fill {k} folds", video_ids.len())));
    }
    let mut order: Vec<String> = video_ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (order.len() / k, order.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for id in 0..k {
        let len = base + usize::from(id < extra);
        let val: Vec<String> = order[start..start + len].to_vec();
        let train = order.iter().filter(|v| !val.contains(v)).cloned().collect();
        folds.push(Fold { id: id + 1, train, val });
        start += len;
    }
    Ok(folds)
}
