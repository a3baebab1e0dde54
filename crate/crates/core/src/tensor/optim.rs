use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Piecewise-constant learning rate indexed by epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    /// `(epoch, lr)` pairs sorted by epoch: from `epoch` on, the rate is `lr`.
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self { base, milestones: Vec::new() }
    }

    /// `base` until `decay_epoch`, `base * factor` afterwards.
    pub fn step_decay(base: f64, decay_epoch: usize, factor: f64) -> Self {
        Self { base, milestones: vec![(decay_epoch, base * factor)] }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .take_while(|(e, _)| *e <= epoch)
            .last()
            .map_or(self.base, |&(_, lr)| lr)
    }
}

/// Adam moment buffers, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub schedule: LrSchedule,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, schedule: LrSchedule) -> Self {
        let (first_moment, second_moment) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { step: 0, first_moment, second_moment, schedule }
    }

    /// One bias-corrected Adam update. `grads[i]` must match `params[i]`.
    pub fn adam_step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        cfg: &AdamConfig,
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(dim_err(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(dim_err(format!(
                    "adam: parameter {i} has shape {:?} but gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(cfg.beta1);
        let b2 = T::from_f64_lossy(cfg.beta2);
        let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
        let eps = T::from_f64_lossy(cfg.eps);
        let lr = T::from_f64_lossy(lr);
        let one = T::one();
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
