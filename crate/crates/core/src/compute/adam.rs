use serde::{Deserialize, Serialize};

use crate::compute::{ComputeError, Tensor};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 penalty: `weight_decay * param` is added to the gradient
    /// before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0005,
        }
    }
}

/// First and second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// One bias-corrected Adam update of `params` in place.
    ///
    /// Fails without touching anything if a gradient is non-finite or the
    /// shapes disagree with the state.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        cfg: &AdamConfig,
    ) -> Result<(), ComputeError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(ComputeError::StateMismatch(format!(
                "{} params, {} grads, {} accumulators",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[k].shape() {
                return Err(ComputeError::StateMismatch(format!(
                    "parameter {k}: {:?} vs grad {:?} vs state {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[k].shape()
                )));
            }
            if !g.all_finite() {
                return Err(ComputeError::NonFiniteGradient(k));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let bias1 = T::one() - b1.powi(t);
        let bias2 = T::one() - b2.powi(t);
        let (lr, eps, wd) = (T::lit(cfg.lr), T::lit(cfg.eps), T::lit(cfg.weight_decay));
        let one = T::one();

        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for (((pi, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                let grad = gi + wd * *pi;
                *mi = b1 * *mi + (one - b1) * grad;
                *vi = b2 * *vi + (one - b2) * grad * grad;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
