//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments for every parameter of a store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(store: &ParamStore<S>, hyper: AdamHyper) -> Self {
        let zeros: Vec<Tensor<S>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            hyper,
        }
    }
}

/// One AdamW update. Weight decay `θ ← θ − lr·λ·θ` applies only to
/// parameters flagged for decay and is kept out of the moment estimates.
pub fn adamw_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &GradMap<S>,
    state: &mut OptimizerState<S>,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::ParamMismatch(format!(
            "optimizer covers {} parameters, gradients {}, store {}",
            state.m.len(),
            grads.len(),
            store.len()
        )));
    }
    for (id, g) in grads.iter() {
        let p = store.param(id);
        if g.shape() != p.value.shape() || state.m[id.0].shape() != p.value.shape() {
            return Err(Error::ParamMismatch(format!(
                "{}: gradient {:?} vs parameter {:?}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
    }
    let h = state.hyper;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for (id, g) in grads.iter() {
        let decay = if store.param(id).decay { lr * h.weight_decay } else { 0.0 };
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let theta = store.get_mut(id).data_mut();
        for i in 0..theta.len() {
            let gi = g.data()[i].f64();
            let mi = h.beta1 * m[i].f64() + (1.0 - h.beta1) * gi;
            let vi = h.beta2 * v[i].f64() + (1.0 - h.beta2) * gi * gi;
            m[i] = S::of(mi);
            v[i] = S::of(vi);
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            let th = theta[i].f64();
            theta[i] = S::of(th - decay * th - lr * mhat / (vhat.sqrt() + h.eps));
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay reaching 0 at
/// `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if !(base_lr > 0.0) || !base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr {base_lr} must be positive")));
        }
        if total_steps == 0 || warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warmup {warmup_steps} must be shorter than {total_steps} total steps"
            )));
        }
        Ok(Schedule {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn from_epochs(base_lr: f64, warmup_epochs: usize, total_epochs: usize, steps_per_epoch: usize) -> Result<Self> {
        Self::new(base_lr, warmup_epochs * steps_per_epoch, total_epochs * steps_per_epoch)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}
