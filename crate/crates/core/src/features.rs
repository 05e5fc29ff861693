//! Image-only encoder-decoder producing a full-resolution feature map.
//!
//! Radar never enters this network: it sees the intensity image, an optical
//! flow field and a normalized coordinate map, and radar depth is attached to
//! its per-pixel output afterwards.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pixel;
use crate::nn::{BatchNorm2d, Conv2d, MaxPool2, Module, Param, Relu, Rng, Scalar, Tensor, UpsampleNearest2};

/// Two-channel map whose x plane holds `j / (W - 1)` and y plane `i / (H - 1)`.
pub fn make_coord_map<T: Scalar>(width: usize, height: usize) -> Result<Tensor<T>> {
    if width < 2 || height < 2 {
        return Err(Error::InvalidArgument(format!(
            "coordinate map needs at least 2x2 pixels, got {width}x{height}"
        )));
    }
    let mut data = Vec::with_capacity(2 * width * height);
    for _ in 0..height {
        for j in 0..width {
            data.push(T::from_f64(j as f64 / (width - 1) as f64));
        }
    }
    for i in 0..height {
        let y = T::from_f64(i as f64 / (height - 1) as f64);
        data.extend(std::iter::repeat(y).take(width));
    }
    Tensor::new(&[2, height, width], data)
}

/// Network input planes, all `H x W`.
#[derive(Clone, Debug)]
pub struct ExtractorInput<T> {
    /// 1 or 3 channels in `[0, 1]`.
    pub image: Tensor<T>,
    /// Optical flow in pixels (`dx`, `dy`); all zeros when no second frame exists.
    pub flow: Tensor<T>,
    pub coords: Tensor<T>,
}

impl<T: Scalar> ExtractorInput<T> {
    /// Builds the input with a freshly computed coordinate map; `flow = None` means zero flow.
    pub fn new(image: Tensor<T>, flow: Option<Tensor<T>>) -> Result<Self> {
        let (_, h, w) = image.dims3("extractor input")?;
        let flow = flow.unwrap_or_else(|| Tensor::zeros(&[2, h, w]));
        let coords = make_coord_map(w, h)?;
        let input = Self { image, flow, coords };
        input.validate()?;
        Ok(input)
    }

    pub fn validate(&self) -> Result<()> {
        let (ic, h, w) = self.image.dims3("extractor input")?;
        if ic != 1 && ic != 3 {
            return Err(Error::shape("extractor input", format!("image must have 1 or 3 channels, got {ic}")));
        }
        if self.flow.shape() != [2, h, w] || self.coords.shape() != [2, h, w] {
            return Err(Error::shape(
                "extractor input",
                format!(
                    "flow {:?} / coords {:?} do not match image {h}x{w}",
                    self.flow.shape(),
                    self.coords.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn stacked(&self) -> Result<Tensor<T>> {
        Tensor::concat_channels(&[&self.image, &self.flow, &self.coords])
    }
}

/// Channel plan of the extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub in_channels: usize,
    pub stem: usize,
    pub down: [usize; 2],
    pub bottleneck: usize,
    pub up: [usize; 2],
    pub feature_channels: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            in_channels: 5,
            stem: 16,
            down: [32, 64],
            bottleneck: 64,
            up: [32, 32],
            feature_channels: 32,
        }
    }
}

impl ExtractorConfig {
    /// Spatial size must survive both 2x poolings exactly.
    pub const DOWNSAMPLING: usize = 4;
}

/// `c x H x W` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub tensor: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// Feature vector at a pixel.
    pub fn at(&self, p: Pixel) -> Vec<T> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        (0..c).map(|k| self.tensor.data()[(k * h + p.y) * w + p.x]).collect()
    }
}

#[derive(Clone, Debug)]
struct ConvBnRelu<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    relu: Relu,
}

impl<T: Scalar> ConvBnRelu<T> {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, 3, 1, 1, false, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
            relu: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.forward(x)?;
        let y = self.bn.forward(&y)?;
        Ok(self.relu.forward(&y))
    }

    fn backward(&mut self, g: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let g = self.relu.backward(g)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g, need_input_grad)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv.params_mut();
        p.extend(self.bn.params_mut());
        p
    }
}

/// Encoder-decoder:
///
/// ```text
/// stem     conv3x3 in->16, BN, ReLU
/// down1    [conv3x3, BN, ReLU] x2 (16->32->32), maxpool 2x2
/// down2    [conv3x3, BN, ReLU] x2 (32->64->64), maxpool 2x2
/// bottle   conv3x3 64->64, BN, ReLU
/// up1      nearest x2, conv3x3 64->32, BN, ReLU
/// up2      nearest x2, conv3x3 32->32, BN, ReLU
/// head     conv1x1 32->c
/// ```
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    config: ExtractorConfig,
    stem: ConvBnRelu<T>,
    down: [(ConvBnRelu<T>, ConvBnRelu<T>, MaxPool2); 2],
    bottleneck: ConvBnRelu<T>,
    up: [(UpsampleNearest2, ConvBnRelu<T>); 2],
    head: Conv2d<T>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(config: ExtractorConfig, rng: &mut Rng) -> Self {
        let c = config;
        let stem = ConvBnRelu::new("extractor.stem", c.in_channels, c.stem, rng);
        let down1 = (
            ConvBnRelu::new("extractor.down1.a", c.stem, c.down[0], rng),
            ConvBnRelu::new("extractor.down1.b", c.down[0], c.down[0], rng),
            MaxPool2::new(),
        );
        let down2 = (
            ConvBnRelu::new("extractor.down2.a", c.down[0], c.down[1], rng),
            ConvBnRelu::new("extractor.down2.b", c.down[1], c.down[1], rng),
            MaxPool2::new(),
        );
        let bottleneck = ConvBnRelu::new("extractor.bottleneck", c.down[1], c.bottleneck, rng);
        let up1 = (
            UpsampleNearest2::new(),
            ConvBnRelu::new("extractor.up1", c.bottleneck, c.up[0], rng),
        );
        let up2 = (
            UpsampleNearest2::new(),
            ConvBnRelu::new("extractor.up2", c.up[0], c.up[1], rng),
        );
        let head = Conv2d::new("extractor.head", c.up[1], c.feature_channels, 1, 1, 0, true, rng);
        Self {
            config,
            stem,
            down: [down1, down2],
            bottleneck,
            up: [up1, up2],
            head,
        }
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn feature_channels(&self) -> usize {
        self.config.feature_channels
    }

    pub fn extract(&mut self, input: &ExtractorInput<T>) -> Result<FeatureMap<T>> {
        input.validate()?;
        self.forward(&input.stacked()?)
    }

    /// Forward pass over an already stacked `(in_channels, H, W)` tensor.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<FeatureMap<T>> {
        let (c, h, w) = x.dims3("extractor")?;
        if c != self.config.in_channels {
            return Err(Error::shape(
                "extractor",
                format!("trained for {} input channels, got {c}", self.config.in_channels),
            ));
        }
        let k = ExtractorConfig::DOWNSAMPLING;
        if h % k != 0 || w % k != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "extractor",
                format!("input {h}x{w} must be a non-zero multiple of {k} in both dimensions"),
            ));
        }
        let mut y = self.stem.forward(x)?;
        for (a, b, pool) in self.down.iter_mut() {
            y = a.forward(&y)?;
            y = b.forward(&y)?;
            y = pool.forward(&y)?;
        }
        y = self.bottleneck.forward(&y)?;
        for (up, conv) in self.up.iter_mut() {
            y = up.forward(&y)?;
            y = conv.forward(&y)?;
        }
        let out = self.head.forward(&y)?;
        debug_assert!(out.all_finite(), "non-finite feature map");
        debug_assert_eq!(&out.shape()[1..], &[h, w]);
        Ok(FeatureMap { tensor: out })
    }

    /// Backpropagates a feature-map gradient into all parameters. The input
    /// gradient is only computed when `need_input_grad` is set.
    pub fn backward(&mut self, grad: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let mut g = self
            .head
            .backward(grad, true)?
            .expect("input gradient requested");
        for (up, conv) in self.up.iter_mut().rev() {
            g = conv.backward(&g, true)?.expect("input gradient requested");
            g = up.backward(&g)?;
        }
        g = self.bottleneck.backward(&g, true)?.expect("input gradient requested");
        for (a, b, pool) in self.down.iter_mut().rev() {
            g = pool.backward(&g)?;
            g = b.backward(&g, true)?.expect("input gradient requested");
            g = a.backward(&g, true)?.expect("input gradient requested");
        }
        self.stem.backward(&g, need_input_grad)
    }
}

impl<T: Scalar> Module<T> for FeatureExtractor<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.stem.params();
        for (a, b, _) in &self.down {
            p.extend(a.params());
            p.extend(b.params());
        }
        p.extend(self.bottleneck.params());
        for (_, conv) in &self.up {
            p.extend(conv.params());
        }
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.stem.params_mut();
        for (a, b, _) in self.down.iter_mut() {
            p.extend(a.params_mut());
            p.extend(b.params_mut());
        }
        p.extend(self.bottleneck.params_mut());
        for (_, conv) in self.up.iter_mut() {
            p.extend(conv.params_mut());
        }
        p.extend(self.head.params_mut());
        p
    }

    fn set_training(&mut self, training: bool) {
        self.stem.bn.set_training(training);
        for (a, b, _) in self.down.iter_mut() {
            a.bn.set_training(training);
            b.bn.set_training(training);
        }
        self.bottleneck.bn.set_training(training);
        for (_, conv) in self.up.iter_mut() {
            conv.bn.set_training(training);
        }
    }

    fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.stem.relu.hash_branch(&mut h);
        for (a, b, pool) in &self.down {
            a.relu.hash_branch(&mut h);
            b.relu.hash_branch(&mut h);
            pool.hash_branch(&mut h);
        }
        self.bottleneck.relu.hash_branch(&mut h);
        for (_, conv) in &self.up {
            conv.relu.hash_branch(&mut h);
        }
        h.finish()
    }
}
