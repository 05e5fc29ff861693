use std::hash::{Hash, Hasher};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// 2x2 max pooling with stride 2. Gradients go to the first maximal element
/// in row-major window order.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    argmax: Vec<u32>,
    input_dims: (usize, usize, usize),
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = input.dims3("maxpool")?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::shape("maxpool", format!("needs even spatial size, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = input.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        self.argmax.clear();
        self.argmax.reserve(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + 2 * oy * w + 2 * ox;
                    let mut best = x[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    self.argmax.push(best_idx as u32);
                }
            }
        }
        self.input_dims = (c, h, w);
        Tensor::new(&[c, oh, ow], out)
    }

    pub fn backward<T: Scalar>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = self.input_dims;
        if grad_out.shape() != [c, h / 2, w / 2] {
            return Err(Error::shape(
                "maxpool",
                format!("gradient {:?} vs output {:?}", grad_out.shape(), [c, h / 2, w / 2]),
            ));
        }
        let mut dx = vec![T::zero(); c * h * w];
        for (&idx, &g) in self.argmax.iter().zip(grad_out.data()) {
            dx[idx as usize] = dx[idx as usize] + g;
        }
        Tensor::new(&[c, h, w], dx)
    }

    pub fn hash_branch(&self, state: &mut impl Hasher) {
        self.argmax.hash(state);
    }
}

/// Nearest-neighbour upsampling by a factor of two.
#[derive(Clone, Debug, Default)]
pub struct UpsampleNearest2 {
    input_dims: (usize, usize, usize),
}

impl UpsampleNearest2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = input.dims3("upsample")?;
        let (oh, ow) = (2 * h, 2 * w);
        let x = input.data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let src = &x[(ch * h + oy / 2) * w..(ch * h + oy / 2 + 1) * w];
                let dst = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
                for (ox, v) in dst.iter_mut().enumerate() {
                    *v = src[ox / 2];
                }
            }
        }
        self.input_dims = (c, h, w);
        Tensor::new(&[c, oh, ow], out)
    }

    pub fn backward<T: Scalar>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = self.input_dims;
        let (oh, ow) = (2 * h, 2 * w);
        if grad_out.shape() != [c, oh, ow] {
            return Err(Error::shape(
                "upsample",
                format!("gradient {:?} vs output {:?}", grad_out.shape(), [c, oh, ow]),
            ));
        }
        let g = grad_out.data();
        let mut dx = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for oy in 0..oh {
                let src = &g[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
                let dst = &mut dx[(ch * h + oy / 2) * w..(ch * h + oy / 2 + 1) * w];
                for (ox, &v) in src.iter().enumerate() {
                    dst[ox / 2] = dst[ox / 2] + v;
                }
            }
        }
        Tensor::new(&[c, h, w], dx)
    }
}
