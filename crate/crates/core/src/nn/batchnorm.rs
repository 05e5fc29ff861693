use super::{Module, Param, Scalar, Tensor};
use crate::error::{Error, Result};

const EPS: f64 = 1e-5;

/// Per-channel batch normalization of a single `(C, H, W)` image.
///
/// Training mode normalizes with the image's own spatial statistics and folds
/// them into the running estimates (`running = m * running + (1 - m) * batch`,
/// `m = 0.9`). Inference mode uses the running estimates, which makes the layer
/// an affine map.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    training: bool,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    dims: (usize, usize, usize),
    training: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::buffer(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
            ),
            momentum: 0.9,
            training: true,
            cache: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = input.dims3(&self.name)?;
        if c != self.gamma.value.len() {
            return Err(Error::shape(
                &self.name,
                format!("expected {} channels, got {c}", self.gamma.value.len()),
            ));
        }
        let n = h * w;
        let eps = T::from_f64(EPS);
        let mut out = vec![T::zero(); c * n];
        let mut xhat = vec![T::zero(); c * n];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let x = &input.data()[ch * n..(ch + 1) * n];
            let (mean, var) = if self.training {
                let nf = T::from_f64(n as f64);
                let mean = x.iter().fold(T::zero(), |a, &b| a + b) / nf;
                let var = x.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / nf;
                let m = T::from_f64(self.momentum);
                let unbiased = if n > 1 {
                    var * nf / T::from_f64((n - 1) as f64)
                } else {
                    var
                };
                let rm = &mut self.running_mean.value.data_mut()[ch];
                *rm = m * *rm + (T::one() - m) * mean;
                let rv = &mut self.running_var.value.data_mut()[ch];
                *rv = m * *rv + (T::one() - m) * unbiased;
                (mean, var)
            } else {
                (
                    self.running_mean.value.data()[ch],
                    self.running_var.value.data()[ch],
                )
            };
            let istd = T::one() / (var + eps).sqrt();
            inv_std[ch] = istd;
            let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for i in 0..n {
                let xh = (x[i] - mean) * istd;
                xhat[ch * n + i] = xh;
                out[ch * n + i] = g * xh + b;
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            dims: (c, h, w),
            training: self.training,
        });
        Tensor::new(&[c, h, w], out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::shape(&self.name, "backward called before forward"))?;
        let (c, h, w) = cache.dims;
        if grad_out.shape() != [c, h, w] {
            return Err(Error::shape(
                &self.name,
                format!("gradient {:?} vs output {:?}", grad_out.shape(), [c, h, w]),
            ));
        }
        let n = h * w;
        let nf = T::from_f64(n as f64);
        let mut dx = vec![T::zero(); c * n];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let dy = &grad_out.data()[ch * n..(ch + 1) * n];
            let xh = &cache.xhat[ch * n..(ch + 1) * n];
            let g = self.gamma.value.data()[ch];
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for i in 0..n {
                sum_dy = sum_dy + dy[i];
                sum_dy_xh = sum_dy_xh + dy[i] * xh[i];
            }
            dgamma[ch] = sum_dy_xh;
            dbeta[ch] = sum_dy;
            let istd = cache.inv_std[ch];
            let out = &mut dx[ch * n..(ch + 1) * n];
            if cache.training {
                // dx = gamma * inv_std / N * (N dy - sum(dy) - xhat * sum(dy * xhat))
                let scale = g * istd / nf;
                for i in 0..n {
                    out[i] = scale * (nf * dy[i] - sum_dy - xh[i] * sum_dy_xh);
                }
            } else {
                let scale = g * istd;
                for i in 0..n {
                    out[i] = scale * dy[i];
                }
            }
        }
        self.gamma.accumulate(&dgamma);
        self.beta.accumulate(&dbeta);
        Tensor::new(&[c, h, w], dx)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }

    fn set_training(&mut self, training: bool) {
        self.training = training;
    }
}
