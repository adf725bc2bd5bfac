//! Adam and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::{Bound, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("optimizer.{name} = {v} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("optimizer.eps must be positive".into()));
        }
        Ok(())
    }
}

/// `lr * factor^floor(iter / every)`; `every == 0` disables decay.
pub fn lr_at(iter: usize, lr: f64, every: usize, factor: f64) -> f64 {
    if every == 0 {
        return lr;
    }
    lr * factor.powi((iter / every) as i32)
}

/// Adam moments for one parameter store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![T::zero(); t.data().len()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update. Parameters without a gradient keep their
    /// value and moments.
    pub fn step(&mut self, store: &mut ParamStore<T>, bound: &Bound, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.adam_beta1, self.cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = T::of(lr * c2.sqrt() / c1);
        let eps = T::of(self.cfg.eps * c2.sqrt());
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (a1, a2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(grad) = grads.get(bound.var(id)) else {
                continue;
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let param = store.get_mut(id).data_mut();
            for (((p, &g), m), v) in param.iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1t * *m + a1 * g;
                *v = b2t * *v + a2 * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}
