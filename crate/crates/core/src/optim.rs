//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moments per parameter tensor (visitation order) and the
/// number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

impl OptimState {
    pub fn new<P: Params<f32>>(params: &P, config: AdamWConfig) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, t, _| m.push(Tensor::zeros(t.shape())));
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One AdamW update at learning rate `lr`. Weight decay `θ ← θ − lr·wd·θ`
/// applies only to parameters whose kind decays; the Adam step uses
/// bias-corrected moments. A missing gradient on a decayed parameter is a
/// contract violation; elsewhere it counts as zero.
pub fn adamw_step<P: Params<f32>>(params: &mut P, state: &mut OptimState, lr: f64) -> Result<()> {
    let cfg = state.config;
    state.step += 1;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    let mut i = 0;
    let mut err = None;
    params.visit_mut("", &mut |name, theta, kind| {
        if err.is_some() {
            return;
        }
        let (Some(m), Some(v)) = (state.m.get_mut(i), state.v.get_mut(i)) else {
            err = Some(Error::Contract(format!("optimizer state has no slot for {name}")));
            return;
        };
        i += 1;
        if m.shape() != theta.shape() {
            err = Some(Error::shape("adamw_step", theta.shape(), m.shape()));
            return;
        }
        let grad = match theta.grad() {
            Some(g) => g.to_vec(),
            None if kind.decays() => {
                err = Some(Error::Contract(format!("no gradient for decayed parameter {name}")));
                return;
            }
            None => vec![0.0; theta.len()],
        };
        let decay = if kind.decays() { lr * cfg.weight_decay } else { 0.0 };
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (k, p) in theta.data_mut().iter_mut().enumerate() {
            let g = f64::from(grad[k]);
            md[k] = cfg.beta1 * md[k] + (1.0 - cfg.beta1) * g;
            vd[k] = cfg.beta2 * vd[k] + (1.0 - cfg.beta2) * g * g;
            let update = (md[k] / bc1) / ((vd[k] / bc2).sqrt() + cfg.eps);
            let x = f64::from(*p);
            *p = (x - decay * x - lr * update) as f32;
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != state.m.len() {
        return Err(Error::Contract(format!(
            "optimizer state holds {} slots for {i} parameters",
            state.m.len()
        )));
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl LrSchedule {
    pub const DEFAULT_BASE_LR: f64 = 5e-4;
    pub const DEFAULT_WARMUP_EPOCHS: usize = 5;

    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize, steps_per_epoch: usize) -> Result<Self> {
        if !(base_lr >= 0.0 && base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {base_lr}"
            )));
        }
        if steps_per_epoch == 0 {
            return Err(Error::Config("steps per epoch must be >= 1".into()));
        }
        if warmup_epochs >= total_epochs {
            return Err(Error::Config(format!(
                "warmup ({warmup_epochs} epochs) must be shorter than training ({total_epochs} epochs)"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_epochs,
            total_epochs,
            steps_per_epoch,
        })
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    /// Rate at `step`; steps past the end are clamped to the final value.
    pub fn lr_at(&self, step: usize) -> f64 {
        let (warm, total) = (self.warmup_steps(), self.total_steps());
        if step < warm {
            return self.base_lr * step as f64 / warm as f64;
        }
        let progress = ((step - warm) as f64 / (total - warm) as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}
