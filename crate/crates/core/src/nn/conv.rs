use super::gemm::{gemm, MatRef};
use super::init::{kaiming_uniform, Rng};
use super::{Module, Param, Scalar, Tensor};
use crate::error::{Error, Result};

/// 2-D cross-correlation over a single `(C, H, W)` image, lowered to GEMM via im2col.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    name: String,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<ConvCache<T>>,
}

#[derive(Clone, Debug)]
struct ConvCache<T> {
    cols: Vec<T>,
    input_dims: (usize, usize, usize),
    output_dims: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = kaiming_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        Self {
            name: name.to_string(),
            weight: Param::new(format!("{name}.weight"), weight),
            bias: with_bias
                .then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[out_channels]))),
            in_channels,
            out_channels,
            kernel,
            stride: stride.max(1),
            padding,
            cache: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, p, s) = (self.kernel, self.padding, self.stride);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(Error::shape(
                &self.name,
                format!("input {h}x{w} smaller than kernel {k} with padding {p}"),
            ));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = input.dims3(&self.name)?;
        if c != self.in_channels {
            return Err(Error::shape(
                &self.name,
                format!("expected {} input channels, got {c}", self.in_channels),
            ));
        }
        let (oh, ow) = self.output_size(h, w)?;
        let cols = self.im2col(input.data(), (c, h, w), (oh, ow));
        let rows = c * self.kernel * self.kernel;
        let mut out = vec![T::zero(); self.out_channels * oh * ow];
        if let Some(bias) = &self.bias {
            for (o, chunk) in out.chunks_mut(oh * ow).enumerate() {
                chunk.fill(bias.value.data()[o]);
            }
        }
        gemm(
            T::one(),
            MatRef::new(self.weight.value.data(), self.out_channels, rows),
            MatRef::new(&cols, rows, oh * ow),
            T::one(),
            &mut out,
        );
        self.cache = Some(ConvCache {
            cols,
            input_dims: (c, h, w),
            output_dims: (oh, ow),
        });
        Tensor::new(&[self.out_channels, oh, ow], out)
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked for.
    pub fn backward(&mut self, grad_out: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::shape(&self.name, "backward called before forward"))?;
        let (oh, ow) = cache.output_dims;
        if grad_out.shape() != [self.out_channels, oh, ow] {
            return Err(Error::shape(
                &self.name,
                format!(
                    "output gradient {:?} does not match output {:?}",
                    grad_out.shape(),
                    [self.out_channels, oh, ow]
                ),
            ));
        }
        let (c, h, w) = cache.input_dims;
        let rows = c * self.kernel * self.kernel;
        let spatial = oh * ow;
        let dy = MatRef::new(grad_out.data(), self.out_channels, spatial);

        let mut dw = vec![T::zero(); self.out_channels * rows];
        gemm(T::one(), dy, MatRef::new(&cache.cols, rows, spatial).t(), T::zero(), &mut dw);
        self.weight.accumulate(&dw);

        if let Some(bias) = &mut self.bias {
            let db: Vec<T> = grad_out
                .data()
                .chunks(spatial)
                .map(|ch| ch.iter().fold(T::zero(), |a, &b| a + b))
                .collect();
            bias.accumulate(&db);
        }

        if !need_input_grad {
            return Ok(None);
        }
        let mut dcols = vec![T::zero(); rows * spatial];
        gemm(
            T::one(),
            MatRef::new(self.weight.value.data(), self.out_channels, rows).t(),
            dy,
            T::zero(),
            &mut dcols,
        );
        let dx = self.col2im(&dcols, (c, h, w), (oh, ow));
        Ok(Some(Tensor::new(&[c, h, w], dx)?))
    }

    fn im2col(&self, x: &[T], (c, h, w): (usize, usize, usize), (oh, ow): (usize, usize)) -> Vec<T> {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let mut cols = vec![T::zero(); c * k * k * oh * ow];
        let mut row = 0;
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kj as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *v = src[ix as usize];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], (c, h, w): (usize, usize, usize), (oh, ow): (usize, usize)) -> Vec<T> {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let mut x = vec![T::zero(); c * h * w];
        let mut row = 0;
        for ci in 0..c {
            let plane = &mut x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &g) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * s) as isize + kj as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] = dst[ix as usize] + g;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        x
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}
