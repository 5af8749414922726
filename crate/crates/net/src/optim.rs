//! Batch gradients and the Adam optimizer with cosine learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::graph::Graph;
use crate::model::{FrameInput, Model, Target};
use crate::params::{Binder, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Mean loss over `batch` and the matching averaged parameter gradients
/// (zeros for parameters the batch never touched).
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &[(&FrameInput<T>, Target)],
    lambda: f64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    assert!(!batch.is_empty(), "empty batch");
    let params = model.params();
    let mut grads: Vec<Tensor<T>> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
    let scale = T::lit(1.0 / batch.len() as f64);
    let mut total = 0.0;
    for (input, target) in batch {
        let mut g = Graph::new();
        let mut p = Binder::new(params);
        let (_, loss) = model.build_loss(&mut g, &mut p, input, target, lambda)?;
        let l = g.value(loss).data()[0].f64();
        if !l.is_finite() {
            return Err(NetError::NumericFailure { head: "loss", layer: 0 });
        }
        total += l;
        for (id, gv) in g.backward(loss, scale).params() {
            for (a, b) in grads[*id].data_mut().iter_mut().zip(gv) {
                *a += *b;
            }
        }
    }
    Ok((total / batch.len() as f64, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the learning rate decays along a half cosine.
    pub total_steps: u64,
    /// Floor of the schedule as a fraction of `lr`.
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: 1000,
            min_lr_ratio: 0.05,
            clip_norm: Some(5.0),
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.lr;
        }
        let frac = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> StepInfo {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = self.config.lr_at(self.step);
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let clip = T::lit(clip);
        let step_size = T::lit(lr / bc1);
        let sqrt_bc2 = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        for (id, g) in grads.iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() / sqrt_bc2 + eps);
            }
        }
        StepInfo { lr, grad_norm: norm }
    }
}
