use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::{AuLabelFrame, UNKNOWN};
use crate::tensor::Element;
use crate::vivit::NUM_AUS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalLossConfig {
    /// Weight of the positive class; negatives get `1 − alpha`.
    pub alpha: f64,
    /// Focusing exponent on `1 − p_t`.
    pub gamma: f64,
    /// Optional per-AU multipliers for class imbalance.
    pub au_weights: Option<[f64; NUM_AUS]>,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        FocalLossConfig { alpha: 0.25, gamma: 2.0, au_weights: None }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!("focal alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("focal gamma must be non-negative, got {}", self.gamma)));
        }
        if let Some(w) = &self.au_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::config("per-AU loss weights must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss and d(loss)/d(logit) of one annotated entry, evaluated in f64.
pub fn focal_entry(logit: f64, positive: bool, cfg: &FocalLossConfig) -> (f64, f64) {
    let s = if positive { 1.0 } else { -1.0 };
    let alpha_t = if positive { cfg.alpha } else { 1.0 - cfg.alpha };
    let log_q = -softplus(-s * logit);
    let q = sigmoid(s * logit);
    let one_minus_q = sigmoid(-s * logit);
    let modulator = one_minus_q.powf(cfg.gamma);
    let loss = -alpha_t * modulator * log_q;
    // d/dz of −α(1−q)^γ log q with dq/dz = s·q(1−q).
    let grad = alpha_t * s * modulator * (cfg.gamma * q * log_q - one_minus_q);
    (loss, grad)
}

/// Mean focal loss over annotated entries of logits `[B, T, 12]`.
///
/// `labels` holds one frame per `(b, t)` in row-major order; entries marked
/// unknown contribute neither value nor gradient.
pub fn focal_loss<F: Element>(tape: &mut Tape<F>, logits: Var, labels: &[AuLabelFrame], cfg: &FocalLossConfig) -> Result<Var> {
    cfg.validate()?;
    let z = tape.value(logits);
    if z.len() != labels.len() * NUM_AUS || tape.shape(logits).last() != Some(&NUM_AUS) {
        return Err(Error::dim(format!(
            "logits {:?} do not match {} label frames",
            tape.shape(logits),
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut grad = vec![0.0f64; z.len()];
    for (i, (&zi, g)) in z.iter().zip(grad.iter_mut()).enumerate() {
        let au = i % NUM_AUS;
        let label = labels[i / NUM_AUS].0[au];
        if label == UNKNOWN {
            continue;
        }
        let w = cfg.au_weights.map_or(1.0, |w| w[au]);
        let (l, d) = focal_entry(zi.as_f64(), label == 1, cfg);
        total += w * l;
        *g = w * d;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let n = count as f64;
    let grad = grad.into_iter().map(|g| F::lit(g / n)).collect();
    tape.fused_scalar(logits, F::lit(total / n), grad)
}
