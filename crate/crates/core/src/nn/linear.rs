use super::gemm::{gemm, MatRef};
use super::init::{kaiming_uniform, Rng};
use super::{Module, Param, Scalar, Tensor};
use crate::error::{Error, Result};

/// Fully-connected layer over a batch of row vectors: `(N, in) -> (N, out)`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    name: String,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Self {
            name: name.to_string(),
            weight: Param::new(
                format!("{name}.weight"),
                kaiming_uniform(&[outputs, inputs], inputs, rng),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[outputs])),
            input: None,
        }
    }

    /// Layer whose weights and bias start at exactly zero.
    pub fn zeroed(name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            name: name.to_string(),
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[outputs, inputs])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[outputs])),
            input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, f) = input.dims2(&self.name)?;
        if f != self.inputs() {
            return Err(Error::shape(
                &self.name,
                format!("expected {} input features, got {f}", self.inputs()),
            ));
        }
        let out_f = self.outputs();
        let mut out = Vec::with_capacity(n * out_f);
        for _ in 0..n {
            out.extend_from_slice(self.bias.value.data());
        }
        gemm(
            T::one(),
            MatRef::new(input.data(), n, f),
            MatRef::new(self.weight.value.data(), out_f, f).t(),
            T::one(),
            &mut out,
        );
        self.input = Some(input.clone());
        Tensor::new(&[n, out_f], out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self
            .input
            .as_ref()
            .ok_or_else(|| Error::shape(&self.name, "backward called before forward"))?;
        let (n, f) = input.dims2(&self.name)?;
        let out_f = self.outputs();
        if grad_out.shape() != [n, out_f] {
            return Err(Error::shape(
                &self.name,
                format!("gradient {:?} vs output {:?}", grad_out.shape(), [n, out_f]),
            ));
        }
        let dy = MatRef::new(grad_out.data(), n, out_f);
        let mut dw = vec![T::zero(); out_f * f];
        gemm(T::one(), dy.t(), MatRef::new(input.data(), n, f), T::zero(), &mut dw);
        self.weight.accumulate(&dw);
        let mut db = vec![T::zero(); out_f];
        for row in grad_out.data().chunks(out_f) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc = *acc + g;
            }
        }
        self.bias.accumulate(&db);
        let mut dx = vec![T::zero(); n * f];
        gemm(
            T::one(),
            dy,
            MatRef::new(self.weight.value.data(), out_f, f),
            T::zero(),
            &mut dx,
        );
        Tensor::new(&[n, f], dx)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
