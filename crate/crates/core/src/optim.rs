//! Adam in the ascent direction and the warmup-plus-cosine learning rate.

use serde::{Deserialize, Serialize};

use crate::policy::PolicyParams;
use crate::{Error, Result, Scalar};

/// Linear warmup over the first `warmup_fraction * total` steps to `lr_max`,
/// then cosine decay to zero at `total`.
pub fn lr_at(step: usize, lr_max: f64, total: usize, warmup_fraction: f64) -> f64 {
    let t = step.min(total) as f64;
    let total = total as f64;
    let warm = warmup_fraction * total;
    if t < warm {
        lr_max * t / warm
    } else {
        let progress = (t - warm) / (total - warm);
        lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied as `theta -= lr * weight_decay * theta`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Serializable moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub steps: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    cfg: AdamConfig,
    steps: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, len: usize) -> Self {
        Self { cfg, steps: 0, m: vec![T::zero(); len], v: vec![T::zero(); len] }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Moves `theta` along `grad` (ascent).
    pub fn ascend(&mut self, theta: &mut PolicyParams<T>, grad: &PolicyParams<T>, lr: f64) {
        assert_eq!(theta.len(), self.m.len(), "optimizer state does not match parameters");
        assert!(theta.same_shape(grad), "gradient shape does not match parameters");
        self.steps += 1;
        let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
        let c1 = T::one() - b1.powi(self.steps as i32);
        let c2 = T::one() - b2.powi(self.steps as i32);
        let (lr, eps, wd) = (T::of(lr), T::of(self.cfg.eps), T::of(self.cfg.weight_decay));
        let g = grad.as_slice();
        for (i, w) in theta.as_mut_slice().iter_mut().enumerate() {
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            *w += lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * *w;
        }
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            steps: self.steps,
            m: self.m.iter().map(|x| x.as_f64()).collect(),
            v: self.v.iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn from_state(cfg: AdamConfig, state: AdamState, len: usize) -> Result<Self> {
        if state.m.len() != len || state.v.len() != len {
            return Err(Error::Incompatible(format!(
                "optimizer state holds {} / {} moments, parameters have {len}",
                state.m.len(),
                state.v.len()
            )));
        }
        Ok(Self {
            cfg,
            steps: state.steps,
            m: state.m.into_iter().map(T::of).collect(),
            v: state.v.into_iter().map(T::of).collect(),
        })
    }
}
