//! Minimal dense-tensor kernel: a fixed menu of layers with hand-written
//! backward passes, Adam, and a finite-difference gradient checker.
//!
//! Every layer is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for gradient verification.

mod activation;
mod adam;
mod batchnorm;
mod conv;
mod gemm;
pub mod gradcheck;
mod init;
mod linear;
mod param;
mod pool;
mod tensor;

pub use activation::{sigmoid, Relu, Sigmoid};
pub use adam::{AdamConfig, AdamState};
pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamGradError, Pass, Probe};
pub use init::{kaiming_uniform, seeded, Rng};
pub use linear::Linear;
pub use param::{Module, ModelParams, Param};
pub use pool::{MaxPool2, UpsampleNearest2};
pub use tensor::Tensor;

use std::fmt::Debug;

use num_traits::Float;

/// Floating-point element type of a [`Tensor`].
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;

    fn into_f64(self) -> f64;

    /// Raw GEMM: `C = alpha * A * B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds, non-aliasing matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn into_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(x: f64) -> Self {
        x
    }

    fn into_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}
