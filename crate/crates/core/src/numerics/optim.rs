use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::{GradStore, ParamStore};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning-rate schedule: linear warmup from zero, then constant, times a
/// multiplicative per-epoch decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub epoch_decay: f64,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_ratio: f64, total_steps: usize, epoch_decay: f64) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {base_lr}")));
        }
        if !(0.0..=1.0).contains(&warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio must lie in [0,1], got {warmup_ratio}")));
        }
        if total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(epoch_decay > 0.0 && epoch_decay <= 1.0) {
            return Err(Error::Config(format!("epoch_decay must lie in (0,1], got {epoch_decay}")));
        }
        Ok(Schedule {
            base_lr,
            warmup_ratio,
            total_steps,
            epoch_decay,
        })
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).ceil() as usize
    }

    pub fn warmup_factor(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if w == 0 || step >= w {
            1.0
        } else {
            step as f64 / w as f64
        }
    }

    pub fn lr(&self, step: usize, epoch: usize) -> f64 {
        self.base_lr * self.warmup_factor(step) * self.epoch_decay.powi(epoch as i32)
    }
}

/// Adam moments and step counter for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub schedule: Schedule,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, schedule: Schedule) -> Self {
        let moments: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            schedule,
            step: 0,
            m: moments.clone(),
            v: moments,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn first_moment(&self, idx: usize) -> &Tensor {
        &self.m[idx]
    }

    /// Applies one Adam update and returns the learning rate used.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore, epoch: usize) -> Result<f64> {
        if self.step >= self.schedule.total_steps {
            return Err(Error::Contract(format!(
                "optimizer step {} beyond total_steps {}",
                self.step, self.schedule.total_steps
            )));
        }
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract("gradient/moment count differs from parameter count".into()));
        }
        let lr = self.schedule.lr(self.step, epoch);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (id, g) in grads.iter() {
            let Some(g) = g else { continue };
            let i = id.index();
            let param = store.get_mut(id);
            if g.shape() != param.shape() {
                return Err(Error::shape("optimizer_step", param.shape(), g.shape()));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        self.step += 1;
        Ok(lr)
    }
}
