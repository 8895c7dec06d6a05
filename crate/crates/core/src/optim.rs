//! AdamW with per-factor learning rates.
//!
//! A step returns the parameter delta instead of writing it, so callers can
//! mask it before application. The step size is kept as `(base, multiplier)`
//! and applied as `multiplier · (base · u)`, which makes the B-step exactly
//! `multiplier` times the A-step for identical moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::Factor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPolicy {
    pub eta_a: f64,
    pub b_multiplier: f64,
}

impl Default for LrPolicy {
    fn default() -> Self {
        LrPolicy {
            eta_a: 0.0005,
            b_multiplier: 5.0,
        }
    }
}

/// Learning rate as `base × multiplier`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSize {
    pub base: f64,
    pub multiplier: f64,
}

impl StepSize {
    pub fn plain(lr: f64) -> Self {
        StepSize {
            base: lr,
            multiplier: 1.0,
        }
    }

    pub fn value(self) -> f64 {
        self.base * self.multiplier
    }

    fn apply(self, u: f64) -> f64 {
        -(self.multiplier * (self.base * u))
    }
}

impl LrPolicy {
    /// Equal rates for both factors.
    pub fn uniform(eta: f64) -> Self {
        LrPolicy {
            eta_a: eta,
            b_multiplier: 1.0,
        }
    }

    pub fn step_size(&self, factor: Factor) -> StepSize {
        match factor {
            Factor::A => StepSize::plain(self.eta_a),
            Factor::B => StepSize {
                base: self.eta_a,
                multiplier: self.b_multiplier,
            },
        }
    }

    pub fn lr_for_factor(&self, factor: Factor) -> f64 {
        self.step_size(factor).value()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_a.is_finite() && self.eta_a >= 0.0) {
            return Err(Error::config("training.eta_a must be finite and non-negative"));
        }
        if !(self.b_multiplier.is_finite() && self.b_multiplier > 0.0) {
            return Err(Error::config("training.b_multiplier must be positive and finite"));
        }
        Ok(())
    }
}

/// Moments for one parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Matrix,
    pub v: Matrix,
    pub t: u64,
    pub cfg: AdamWConfig,
}

impl AdamWState {
    pub fn new(rows: usize, cols: usize, cfg: AdamWConfig) -> Self {
        AdamWState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
            cfg,
        }
    }

    pub fn for_param(param: &Matrix, cfg: AdamWConfig) -> Self {
        AdamWState::new(param.rows(), param.cols(), cfg)
    }

    /// Advances the moments by one step and returns the delta to add to
    /// `param`.
    pub fn step_delta(&mut self, param: &Matrix, grad: &Matrix, lr: StepSize) -> Result<Matrix> {
        if param.shape() != grad.shape() || param.shape() != self.m.shape() {
            return Err(Error::Dimension {
                op: "adamw step",
                lhs: param.shape(),
                rhs: grad.shape(),
            });
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut delta = Matrix::zeros(param.rows(), param.cols());
        let m = self.m.as_mut_slice();
        let v = self.v.as_mut_slice();
        for (k, out) in delta.as_mut_slice().iter_mut().enumerate() {
            let g = grad.as_slice()[k];
            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            let u = m_hat / (v_hat.sqrt() + eps) + weight_decay * param.as_slice()[k];
            *out = lr.apply(u);
        }
        Ok(delta)
    }
}

/// One AdamW step in place; `frozen` leaves both parameters and moments
/// untouched.
pub fn adamw_step(
    state: &mut AdamWState,
    params: &mut Matrix,
    grads: &Matrix,
    lr: StepSize,
    frozen: bool,
) -> Result<()> {
    if frozen {
        return Ok(());
    }
    let delta = state.step_delta(params, grads, lr)?;
    for (p, d) in params.as_mut_slice().iter_mut().zip(delta.as_slice()) {
        *p += d;
    }
    Ok(())
}
