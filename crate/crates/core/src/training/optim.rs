use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Element;

/// SGD with heavy-ball momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F: Element> {
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    velocity: Vec<Option<Vec<F>>>,
}

impl<F: Element> OptimizerState<F> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be non-negative, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(OptimizerState { lr, momentum, max_grad_norm: None, velocity: Vec::new() })
    }

    pub fn with_clipping(mut self, max_norm: Option<f64>) -> Self {
        self.max_grad_norm = max_norm;
        self
    }

    /// Momentum buffer of the `i`-th parameter, once it has been stepped.
    pub fn velocity(&self, i: usize) -> Option<&[F]> {
        self.velocity.get(i).and_then(|v| v.as_deref())
    }
}

/// `v ← μ·v + g; p ← p − lr·v` for every trainable parameter, then clears all grads.
pub fn sgd_step<F: Element>(params: &mut ParamStore<F>, state: &mut OptimizerState<F>) -> Result<()> {
    if state.velocity.len() != params.len() {
        state.velocity.resize(params.len(), None);
    }
    if let Some(p) = params.iter().find(|p| !p.frozen() && p.tensor.grad().is_none()) {
        return Err(Error::usage(format!("trainable parameter {} has no gradient", p.name)));
    }
    let scale = match state.max_grad_norm {
        Some(max) => {
            let sq: f64 = params
                .iter()
                .filter(|p| !p.frozen())
                .flat_map(|p| p.tensor.grad().unwrap_or(&[]))
                .map(|g| g.as_f64() * g.as_f64())
                .sum();
            let norm = sq.sqrt();
            if norm > max { max / norm } else { 1.0 }
        }
        None => 1.0,
    };
    let (lr, mu) = (F::lit(state.lr), F::lit(state.momentum));
    let scale = F::lit(scale);
    for (param, vel) in params.iter_mut().zip(state.velocity.iter_mut()) {
        if param.frozen() {
            continue;
        }
        let grad: Vec<F> = param.tensor.grad().expect("checked above").to_vec();
        let v = vel.get_or_insert_with(|| vec![F::lit(0.0); grad.len()]);
        for ((p, vi), &g) in param.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
            *vi = mu * *vi + g * scale;
            *p = *p - lr * *vi;
        }
    }
    params.zero_grads();
    Ok(())
}
