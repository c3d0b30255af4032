//! AdamW with decoupled weight decay, and cosine annealing.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
}

impl AdamState {
    pub fn new(like: &Matrix) -> Self {
        Self {
            m: Matrix::zeros(like.rows(), like.cols()),
            v: Matrix::zeros(like.rows(), like.cols()),
            step: 0,
        }
    }
}

impl AdamW {
    /// One update at learning rate `lr`. Entries where `trainable` is 0 are
    /// left untouched, including by weight decay.
    pub fn step(
        &self,
        param: &mut Matrix,
        grad: &Matrix,
        state: &mut AdamState,
        lr: f64,
        trainable: Option<&Matrix>,
    ) -> Result<()> {
        if param.shape() != grad.shape() || param.shape() != state.m.shape() {
            return Err(Error::dim(
                "adamw_step",
                format!("param {:?}, grad {:?}", param.shape(), grad.shape()),
            ));
        }
        if let Some(t) = trainable {
            if t.shape() != param.shape() {
                return Err(Error::dim("adamw_step", "trainable mask shape"));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;

        let p = param.data_mut();
        let g = grad.data();
        let m = state.m.data_mut();
        let v = state.v.data_mut();
        for i in 0..p.len() {
            if let Some(mask) = trainable {
                if mask.data()[i] == 0.0 {
                    continue;
                }
            }
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            if self.weight_decay != 0.0 {
                p[i] *= decay;
            }
            p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence("non-finite parameter after AdamW step".into()));
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi t / t_max)) / 2`.
pub fn cosine_lr(t: usize, t_max: usize, lr_max: f64, lr_min: f64) -> f64 {
    if t_max == 0 {
        return lr_max;
    }
    let progress = t.min(t_max) as f64 / t_max as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * progress).cos())
}
