use std::collections::BTreeMap;

use rand::Rng;

use crate::data::Task;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::{Element, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-8;

/// `base_lr * min(t / warmup, sqrt(warmup / t))` for `t >= 1`; a zero warmup
/// means a constant rate.
pub fn lr_at(step: usize, base_lr: f64, warmup: usize) -> f64 {
    if warmup == 0 {
        return base_lr;
    }
    let t = step.max(1) as f64;
    let w = warmup as f64;
    base_lr * (t / w).min((w / t).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Updates applied to this tensor, for bias correction.
    t: u64,
}

/// Adam with the inverse-square-root warm-up schedule. Moments are kept in
/// f64; tensors without a gradient in a step are left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: usize,
    pub base_lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(base_lr: f64, warmup: usize) -> Self {
        AdamState {
            step: 0,
            base_lr,
            warmup,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            moments: BTreeMap::new(),
        }
    }

    /// Shape of the moment buffers for `name`, if any update touched it.
    pub fn moment_len(&self, name: &str) -> Option<usize> {
        self.moments.get(name).map(|m| m.m.len())
    }
}

/// One bias-corrected Adam update. Consumes `grads`; returns the rate used.
pub fn adam_step<F: Element>(
    params: &mut ParamStore<F>,
    grads: BTreeMap<String, Tensor<F>>,
    state: &mut AdamState,
) -> Result<f64> {
    state.step += 1;
    let lr = lr_at(state.step, state.base_lr, state.warmup);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (name, g) in grads {
        let p = params
            .get_mut(&name)
            .ok_or_else(|| Error::invalid("adam_step", format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let mo = state.moments.entry(name).or_insert_with(|| Moments {
            m: vec![0.0; g.len()],
            v: vec![0.0; g.len()],
            t: 0,
        });
        mo.t += 1;
        let c1 = 1.0 - b1.powi(mo.t as i32);
        let c2 = 1.0 - b2.powi(mo.t as i32);
        for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut mo.m).zip(&mut mo.v) {
            let gi = gi.as_f64();
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * gi * gi;
            let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            *w = F::lit(w.as_f64() - update);
        }
    }
    Ok(lr)
}

/// Categorical draw over `(task, weight)`; weights need not be normalized.
pub fn sample_task<R: Rng>(tasks: &[(Task, f64)], rng: &mut R) -> Result<Task> {
    let total: f64 = tasks.iter().map(|t| t.1).sum();
    if tasks.is_empty() || total <= 0.0 || !total.is_finite() {
        return Err(Error::Config("task set is empty or has no positive weight".into()));
    }
    let mut x = rng.random::<f64>() * total;
    for &(task, w) in tasks {
        if x < w {
            return Ok(task);
        }
        x -= w;
    }
    // Rounding at the top end: last task with positive weight.
    Ok(tasks.iter().rev().find(|t| t.1 > 0.0).map(|t| t.0).unwrap())
}
