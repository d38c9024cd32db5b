use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay. Tensors whose gradient is not finite
/// are left untouched for that step and counted in `skipped`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub skipped: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
            skipped: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter tensor");
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            if !g.is_finite() {
                self.skipped += 1;
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                *x -= lr * c.weight_decay * *x;
                *x -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
            }
        }
    }
}

/// Plain gradient descent, with the same non-finite skipping rule.
pub fn sgd_step(params: &mut ParamSet, grads: &[Tensor], lr: f64) -> u64 {
    let mut skipped = 0;
    for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
        if !g.is_finite() {
            skipped += 1;
            continue;
        }
        p.data_mut().iter_mut().zip(g.data()).for_each(|(x, gi)| *x -= lr * gi);
    }
    skipped
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
    Sgd,
}

/// An optimizer over one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adam(Adam),
    Sgd { skipped: u64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamSet, weight_decay: f64) -> Self {
        match kind {
            OptimizerKind::Adamw => Optimizer::Adam(Adam::new(
                params,
                AdamConfig {
                    weight_decay,
                    ..AdamConfig::default()
                },
            )),
            OptimizerKind::Sgd => Optimizer::Sgd { skipped: 0 },
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        match self {
            Optimizer::Adam(a) => a.step(params, grads, lr),
            Optimizer::Sgd { skipped } => *skipped += sgd_step(params, grads, lr),
        }
    }

    pub fn skipped(&self) -> u64 {
        match self {
            Optimizer::Adam(a) => a.skipped,
            Optimizer::Sgd { skipped } => *skipped,
        }
    }

    /// Moment tensors and counters, for checkpoints.
    pub fn state(&self) -> (Vec<Tensor>, Vec<Tensor>, u64, u64) {
        match self {
            Optimizer::Adam(a) => (a.m.clone(), a.v.clone(), a.t, a.skipped),
            Optimizer::Sgd { skipped } => (Vec::new(), Vec::new(), 0, *skipped),
        }
    }

    pub fn restore(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, t: u64, skipped: u64) -> Result<()> {
        match self {
            Optimizer::Adam(a) => {
                let same = |xs: &[Tensor], ys: &[Tensor]| {
                    xs.len() == ys.len() && xs.iter().zip(ys).all(|(x, y)| x.shape() == y.shape())
                };
                if !same(&m, &a.m) || !same(&v, &a.v) {
                    return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
                }
                a.m = m;
                a.v = v;
                a.t = t;
                a.skipped = skipped;
            }
            Optimizer::Sgd { skipped: s } => *s = skipped,
        }
        Ok(())
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. Non-finite tensors are ignored.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .filter(|g| g.is_finite())
        .map(Tensor::sq_norm)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().filter(|g| g.is_finite()) {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Linear warmup from 0 to `eta`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, eta: f64, warmup_fraction: f64) -> f64 {
    let warmup = (warmup_fraction * total_steps as f64).round() as usize;
    if step < warmup {
        return eta * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup);
    if span == 0 {
        return eta;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    eta * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
