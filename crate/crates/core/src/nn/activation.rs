use std::hash::{Hash, Hasher};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Vec<bool>,
    shape: Vec<usize>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, input: &Tensor<T>) -> Tensor<T> {
        self.mask = input.data().iter().map(|&x| x > T::zero()).collect();
        self.shape = input.shape().to_vec();
        input.map(|x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn backward<T: Scalar>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_out.shape() != self.shape.as_slice() {
            return Err(Error::shape(
                "relu",
                format!("gradient {:?} vs output {:?}", grad_out.shape(), self.shape),
            ));
        }
        let data = grad_out
            .data()
            .iter()
            .zip(&self.mask)
            .map(|(&g, &on)| if on { g } else { T::zero() })
            .collect();
        Tensor::new(grad_out.shape(), data)
    }

    pub fn hash_branch(&self, state: &mut impl Hasher) {
        self.mask.hash(state);
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sigmoid {
    output: Vec<f64>,
    shape: Vec<usize>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, input: &Tensor<T>) -> Tensor<T> {
        let out = input.map(sigmoid);
        self.output = out.data().iter().map(|x| x.into_f64()).collect();
        self.shape = input.shape().to_vec();
        out
    }

    pub fn backward<T: Scalar>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_out.shape() != self.shape.as_slice() {
            return Err(Error::shape(
                "sigmoid",
                format!("gradient {:?} vs output {:?}", grad_out.shape(), self.shape),
            ));
        }
        let data = grad_out
            .data()
            .iter()
            .zip(&self.output)
            .map(|(&g, &s)| g * T::from_f64(s * (1.0 - s)))
            .collect();
        Tensor::new(grad_out.shape(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let mut relu = Relu::new();
        let x = Tensor::new(&[3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu.forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu.backward(&Tensor::new(&[3], vec![1.0, 1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_basics() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(800.0f64) <= 1.0 && sigmoid(-800.0f64) >= 0.0);
        assert!((sigmoid(2.0f64) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
