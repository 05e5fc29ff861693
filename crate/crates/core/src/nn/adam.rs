use serde::{Deserialize, Serialize};

use super::{Param, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every trainable parameter, in module order.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    names: Vec<String>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Param<T>], config: AdamConfig) -> Self {
        let trainable: Vec<_> = params.iter().filter(|p| p.trainable).collect();
        Self {
            config,
            step: 0,
            names: trainable.iter().map(|p| p.name.clone()).collect(),
            m: trainable.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: trainable.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every trainable parameter.
    ///
    /// The whole step is rejected, leaving parameters and moments untouched,
    /// if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        let mut trainable: Vec<&mut Param<T>> =
            params.iter_mut().filter(|p| p.trainable).map(|p| &mut **p).collect();
        if trainable.len() != self.names.len() {
            return Err(Error::ParamMismatch(format!(
                "optimizer tracks {} parameters, got {}",
                self.names.len(),
                trainable.len()
            )));
        }
        for (p, name) in trainable.iter().zip(&self.names) {
            if &p.name != name || p.grad.shape() != p.value.shape() {
                return Err(Error::ParamMismatch(format!(
                    "optimizer expected `{name}`, got `{}`",
                    p.name
                )));
            }
            if !p.grad.all_finite() {
                return Err(Error::NonFiniteGradient {
                    name: p.name.clone(),
                });
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        let one = T::one();

        for (i, p) in trainable.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] = w[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
