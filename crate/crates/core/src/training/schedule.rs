use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Cosine annealing with warm restarts, advanced once per optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    pub eta_min: f64,
    pub eta_max: f64,
    pub t_0: usize,
    pub t_mult: usize,
    pub t_cur: usize,
    pub t_i: usize,
}

impl SchedulerState {
    pub fn new(eta_min: f64, eta_max: f64, t_0: usize, t_mult: usize) -> Result<Self> {
        if !(eta_min >= 0.0 && eta_min <= eta_max && eta_max.is_finite()) {
            return Err(Error::config(format!("need 0 <= eta_min <= eta_max, got {eta_min} and {eta_max}")));
        }
        if t_0 == 0 || t_mult == 0 {
            return Err(Error::config("T_0 and T_mult must be positive"));
        }
        Ok(SchedulerState { eta_min, eta_max, t_0, t_mult, t_cur: 0, t_i: t_0 })
    }

    /// Learning rate at the current position, without advancing.
    pub fn current(&self) -> f64 {
        if self.t_cur == 0 {
            return self.eta_max;
        }
        let phase = PI * self.t_cur as f64 / self.t_i as f64;
        self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + phase.cos())
    }

    /// Returns the rate for this step, then advances; `true` in the second slot
    /// when the advance triggered a warm restart.
    pub fn advance(&mut self) -> (f64, bool) {
        let lr = self.current();
        self.t_cur += 1;
        let restarted = self.t_cur == self.t_i;
        if restarted {
            self.t_cur = 0;
            self.t_i *= self.t_mult;
        }
        (lr, restarted)
    }
}

/// Rate for the current step, advancing the state.
pub fn cosine_warm_restarts(state: &mut SchedulerState) -> f64 {
    state.advance().0
}
