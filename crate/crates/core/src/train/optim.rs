//! Adam and the step-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::layers::ParamRegistry;
use crate::tensor::{Element, Tensor};

/// Learning rate in effect during `epoch` (1-based): the base rate halved
/// once every `halve_every` completed epochs.
pub fn scheduled_lr(base: f64, halve_every: usize, epoch: usize) -> f64 {
    let halvings = epoch.saturating_sub(1) / halve_every.max(1);
    base * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
}

/// Bias-corrected Adam with one pair of moment tensors per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Element> Adam<T> {
    pub fn new(params: &ParamRegistry<T>, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Adam {
            beta1,
            beta2,
            epsilon,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// Apply one update. `grads` follows the registry's order. Nothing is
    /// modified if any gradient is non-finite or misshapen.
    pub fn update(&mut self, params: &mut ParamRegistry<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in grads.iter().enumerate() {
            let (name, p) = params.by_id(id);
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - self.beta1), T::from_f64_lossy(1.0 - self.beta2));
        let step_size = T::from_f64_lossy(lr / c1);
        let inv_sqrt_c2 = T::from_f64_lossy(1.0 / c2.sqrt());
        let eps = T::from_f64_lossy(self.epsilon);
        for (id, g) in grads.iter().enumerate() {
            let p = params.by_id_mut(id).data_mut();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p = *p - step_size * *m / ((*v).sqrt() * inv_sqrt_c2 + eps);
            }
        }
        Ok(())
    }
}
