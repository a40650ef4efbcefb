//! AdamW with decoupled weight decay, applied to trainable parameters only.

use std::collections::BTreeMap;

use crate::config::{LrSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{Grads, ParamId, ParamRegistry};
use crate::tensor::{consts, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: Scalar,
    pub weight_decay: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl From<&TrainConfig> for AdamWConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamWConfig {
            lr: c.lr,
            weight_decay: c.weight_decay,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }
}

/// Learning rate for `step` (0-based) of `total` under `schedule`.
pub fn lr_at(schedule: LrSchedule, base: Scalar, step: usize, total: usize) -> Scalar {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            let frac = if total == 0 { 0.0 } else { step as Scalar / total as Scalar };
            0.5 * base * (1.0 + (consts::PI * frac).cos())
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: BTreeMap<ParamId, Tensor>,
    v: BTreeMap<ParamId, Tensor>,
}

impl AdamW {
    /// Zero moments for every parameter that is trainable at construction.
    pub fn new(params: &ParamRegistry, config: AdamWConfig) -> Self {
        let mut m = BTreeMap::new();
        for id in params.trainable_ids() {
            m.insert(id, Tensor::zeros(params.get(id).value.shape()));
        }
        AdamW {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&Tensor> {
        self.m.get(&id)
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&Tensor> {
        self.v.get(&id)
    }

    /// One update with learning rate `lr`. `grads` must cover exactly the
    /// trainable set; a gradient for a frozen parameter is a freeze violation.
    pub fn step(&mut self, params: &mut ParamRegistry, grads: &Grads, lr: Scalar) -> Result<()> {
        for (id, _) in grads.iter() {
            if !self.m.contains_key(&id) {
                let p = params.get(id);
                return Err(if p.frozen {
                    Error::FreezeViolation(p.name.clone())
                } else {
                    Error::UnknownParam(p.name.clone())
                });
            }
        }
        if let Some(missing) = self.m.keys().find(|id| grads.get(**id).is_none()) {
            return Err(Error::InvalidArgument(format!(
                "no gradient for trainable parameter `{}`",
                params.get(*missing).name
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - lr * c.weight_decay;
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adamw_step", g.shape(), p.value.shape()));
            }
            let m = self.m.get_mut(&id).expect("checked above");
            let v = self.v.get_mut(&id).expect("checked above");
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *w *= decay;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
