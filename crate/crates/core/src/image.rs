//! Plain raster containers shared by the generator, pipeline and file formats.

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Quantizes intensities in `[0, 1]` to 8 bits.
    pub fn from_intensities(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let pixels = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Intensity in `[0, 1]`.
    pub fn intensity(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x] as f64 / 255.0
    }

    /// `(1, H, W)` tensor of intensities in `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .pixels
            .iter()
            .map(|&p| T::from_f64(p as f64 / 255.0))
            .collect();
        Tensor::new(&[1, self.height, self.width], data).expect("pixel count matches shape")
    }
}

/// Per-pixel optical flow in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    dx: Vec<f32>,
    dy: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            dx: vec![0.0; width * height],
            dy: vec![0.0; width * height],
        }
    }

    pub fn new(width: usize, height: usize, dx: Vec<f32>, dy: Vec<f32>) -> Result<Self> {
        if dx.len() != width * height || dy.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "flow planes of {} and {} values for a {width}x{height} field",
                dx.len(),
                dy.len()
            )));
        }
        Ok(Self {
            width,
            height,
            dx,
            dy,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dx(&self) -> &[f32] {
        &self.dx
    }

    pub fn dy(&self) -> &[f32] {
        &self.dy
    }

    pub fn is_zero(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|&v| v == 0.0)
    }

    /// `(2, H, W)` tensor, x displacement first.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .dx
            .iter()
            .chain(&self.dy)
            .map(|&v| T::from_f64(v as f64))
            .collect();
        Tensor::new(&[2, self.height, self.width], data).expect("plane sizes match shape")
    }
}
