use std::collections::HashSet;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A named tensor owned by a layer, with its accumulated gradient.
///
/// Non-trainable parameters (batch-norm running statistics) are persisted in
/// checkpoints but skipped by the optimizer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub(crate) fn accumulate(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.grad.len());
        for (g, &d) in self.grad.data_mut().iter_mut().zip(delta) {
            *g = *g + d;
        }
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;

    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Switches batch-norm layers between batch statistics and running statistics.
    fn set_training(&mut self, _training: bool) {}

    /// Hash of the piecewise-linear branch taken on the last forward pass
    /// (ReLU masks, pooling argmaxes). Used by the gradient checker to detect
    /// finite-difference probes that straddle a kink.
    fn kink_signature(&self) -> u64 {
        0
    }
}

/// Ordered snapshot of every named tensor of a module.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::ParamMismatch(format!("duplicate parameter `{name}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_module<M: Module<T> + ?Sized>(module: &M) -> Self {
        Self {
            entries: module
                .params()
                .into_iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copies values into `module`; names, order and shapes must agree exactly.
    pub fn apply_to<M: Module<T> + ?Sized>(&self, module: &mut M) -> Result<()> {
        let mut targets = module.params_mut();
        if targets.len() != self.entries.len() {
            return Err(Error::ParamMismatch(format!(
                "module has {} parameters, snapshot has {}",
                targets.len(),
                self.entries.len()
            )));
        }
        for (target, (name, value)) in targets.iter().zip(&self.entries) {
            if &target.name != name || target.value.shape() != value.shape() {
                return Err(Error::ParamMismatch(format!(
                    "expected `{}` {:?}, found `{name}` {:?}",
                    target.name,
                    target.value.shape(),
                    value.shape()
                )));
            }
        }
        for (target, (_, value)) in targets.iter_mut().zip(&self.entries) {
            target.value = value.clone();
        }
        Ok(())
    }
}
