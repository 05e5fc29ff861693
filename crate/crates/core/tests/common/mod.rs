//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hasher;

use rand::Rng as _;
use radepth::geometry::{CameraIntrinsics, Pixel, RadarReturn};
use radepth::nn::{
    grad_check, seeded, BatchNorm2d, Conv2d, GradCheckConfig, GradCheckReport, Linear, MaxPool2, Module, Param, Pass,
    Probe, Relu, Rng, Scalar, Sigmoid, Tensor, UpsampleNearest2,
};
use radepth::evaluator::EvaluatorConfig;
use radepth::features::{make_coord_map, ExtractorConfig};
use radepth::pipeline::{image_loss, image_loss_input_grad, FusionModel};
use radepth::sparse_depth::{ErmEntry, LabelSets, SparseDepthMap};

// ---------------------------------------------------------------------------
// PCRM by exhaustive enumeration of (return, vertical offset) pairs

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OracleLabels {
    /// `(return index, pixel)` pairs.
    pub positives: BTreeSet<(usize, Pixel)>,
    pub negatives: BTreeSet<(usize, Pixel)>,
    pub unlabeled: BTreeSet<(usize, Pixel)>,
    /// Pixel -> smallest positive depth, as raw f32 bits for exact comparison.
    pub pcrm: BTreeMap<Pixel, u32>,
}

/// Labels every expanded radar pixel straight from the definitions: column by
/// rounding the pinhole projection half-up, rows `v0, v0-1, ..., v0-(v-1)`
/// clipped at the top, strict absolute and relative depth tests.
pub fn brute_force_pcrm(
    returns: &[RadarReturn],
    cam: &CameraIntrinsics,
    v: usize,
    lm: &SparseDepthMap,
    t_abs: f64,
    t_rel: f64,
) -> OracleLabels {
    let mut out = OracleLabels::default();
    let v0 = (cam.cy + 0.5).floor() as i64;
    for (ri, r) in returns.iter().enumerate() {
        let u = (cam.fx * r.x / r.z + cam.cx + 0.5).floor() as i64;
        if u < 0 || u >= cam.width as i64 {
            continue;
        }
        // depths are stored in single precision
        let radar = r.z as f32;
        for off in 0..v as i64 {
            let row = v0 - off;
            if row < 0 || row >= cam.height as i64 {
                continue;
            }
            let px = Pixel::new(u as usize, row as usize);
            let lidar = lm.values()[px.y * lm.width() + px.x];
            let key = (ri, px);
            if lidar <= 0.0 {
                out.unlabeled.insert(key);
                continue;
            }
            let diff = (lidar as f64 - radar as f64).abs();
            if diff < t_abs && diff / (lidar as f64) < t_rel {
                out.positives.insert(key);
                let slot = out.pcrm.entry(px).or_insert(radar.to_bits());
                if radar < f32::from_bits(*slot) {
                    *slot = radar.to_bits();
                }
            } else {
                out.negatives.insert(key);
            }
        }
    }
    out
}

/// A random camera, radar returns and a LiDAR map seeded near the returns so
/// all three label classes occur.
pub struct PcrmInstance {
    pub cam: CameraIntrinsics,
    pub returns: Vec<RadarReturn>,
    pub lm: SparseDepthMap,
    pub v: usize,
    pub t_abs: f64,
    pub t_rel: f64,
}

pub fn random_pcrm_instance(seed: u64, default_thresholds: bool) -> PcrmInstance {
    let mut rng = seeded(seed);
    let width = rng.gen_range(8..120);
    let height = rng.gen_range(4..80);
    let fx = rng.gen_range(20.0..300.0);
    let cam = CameraIntrinsics::new(
        fx,
        fx * rng.gen_range(0.8..1.2),
        rng.gen_range(0.0..width as f64),
        rng.gen_range(0.0..height as f64),
        width,
        height,
    )
    .unwrap();
    let returns: Vec<RadarReturn> = (0..rng.gen_range(0..10))
        .map(|_| {
            let z = rng.gen_range(1.0..80.0);
            let u = rng.gen_range(-10.0..width as f64 + 10.0);
            RadarReturn::new((u - cam.cx) * z / cam.fx, z)
        })
        .collect();
    let mut values = vec![0.0f32; width * height];
    for v in values.iter_mut() {
        let roll: f64 = rng.gen();
        if roll < 0.4 && !returns.is_empty() {
            // near some return's depth: a mix of matches and near misses
            let r = &returns[rng.gen_range(0..returns.len())];
            *v = (r.z * (1.0 + rng.gen_range(-0.03..0.03))) as f32;
        } else if roll < 0.7 {
            *v = rng.gen_range(0.5..90.0);
        }
    }
    let lm = SparseDepthMap::from_values(width, height, values).unwrap();
    let v = rng.gen_range(1..height + 8);
    let (t_abs, t_rel) = if default_thresholds {
        (1.0, 0.01)
    } else {
        (rng.gen_range(0.05..3.0), rng.gen_range(0.001..0.1))
    };
    PcrmInstance {
        cam,
        returns,
        lm,
        v,
        t_abs,
        t_rel,
    }
}

// ---------------------------------------------------------------------------
// Finite-difference harness: each layer under test sees its input as a
// trainable parameter and the loss is a fixed random projection of its output.

pub trait LayerUnderTest<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T>;
    /// Input gradient; parameter gradients accumulate internally.
    fn backward(&mut self, g: &Tensor<T>) -> Tensor<T>;
    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }
    fn signature(&self) -> u64 {
        0
    }
}

impl<T: Scalar> LayerUnderTest<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        Conv2d::forward(self, x).unwrap()
    }
    fn backward(&mut self, g: &Tensor<T>) -> Tensor<T> {
        Conv2d::backward(self, g, true).unwrap().unwrap()
    }
    fn params(&self) -> Vec<&Param<T>> {
        Module::params(self)
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Module::params_mut(self)
    }
}

impl<T: Scalar> LayerUnderTest<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        BatchNorm2d::forward(self, x).unwrap()
    }
    fn backward(&mut self, g: &Tensor<T>) -> Tensor<T> {
        BatchNorm2d::backward(self, g).unwrap()
    }
    fn params(&self) -> Vec<&Param<T>> {
        Module::params(self)
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Module::params_mut(self)
    }
}

impl<T: Scalar> LayerUnderTest<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        Linear::forward(self, x).unwrap()
    }
    fn backward(&mut self, g: &Tensor<T>) -> Tensor<T> {
        Linear::backward(self, g).unwrap()
    }
    fn params(&self) -> Vec<&Param<T>> {
        Module::params(self)
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Module::params_mut(self)
    }
}

impl<T: Scalar> LayerUnderTest<T> for Relu {
    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        Relu::forward(self, x)
    }
    fn backward(&mut self, g: &Tensor<T>) -> Tensor<T> {
        Relu::backward(self, g).unwrap()
    }
    fn signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hash_branch(&mut h);
        h.finish()
    }
}

impl<T: Scalar> LayerUnderTest<T> for Sigmoid {
    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        Sigmoid::forward(self, x)
    }
    fn backward(&mut self, g: &Tensor<T>) -> Tensor<T> {
        Sigmoid::backward(self, g).unwrap()
    }
}

impl<T: Scalar> LayerUnderTest<T> for MaxPool2 {
    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        MaxPool2::forward(self, x).unwrap()
    }
    fn backward(&mut self, g: &Tensor<T>) -> Tensor<T> {
        MaxPool2::backward(self, g).unwrap()
    }
    fn signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hash_branch(&mut h);
        h.finish()
    }
}

impl<T: Scalar> LayerUnderTest<T> for UpsampleNearest2 {
    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        UpsampleNearest2::forward(self, x).unwrap()
    }
    fn backward(&mut self, g: &Tensor<T>) -> Tensor<T> {
        UpsampleNearest2::backward(self, g).unwrap()
    }
}

pub struct Harness<T, L> {
    pub input: Param<T>,
    pub layer: L,
    projection: Vec<f64>,
}

impl<T: Scalar, L: LayerUnderTest<T>> Harness<T, L> {
    pub fn new(layer: L, input: Tensor<T>, rng: &mut Rng) -> Self {
        let mut h = Self {
            input: Param::new("input", input),
            layer,
            projection: Vec::new(),
        };
        let out_len = h.layer.forward(&h.input.value).len();
        h.projection = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        h
    }

    /// `sum_i r_i * layer(x)_i` with the projection `r` fixed at construction.
    pub fn objective(&mut self, pass: Pass) -> Probe {
        let out = self.layer.forward(&self.input.value);
        let loss = out
            .data()
            .iter()
            .zip(&self.projection)
            .map(|(o, r)| o.into_f64() * r)
            .sum();
        if pass == Pass::Backward {
            let r: Vec<T> = self.projection.iter().map(|&v| T::from_f64(v)).collect();
            let g = Tensor::new(out.shape(), r).unwrap();
            let gx = self.layer.backward(&g);
            let acc = self.input.grad.data_mut();
            for (a, v) in acc.iter_mut().zip(gx.data()) {
                *a = *a + *v;
            }
        }
        Probe {
            loss,
            signature: self.layer.signature(),
        }
    }
}

impl<T: Scalar, L: LayerUnderTest<T>> Module<T> for Harness<T, L> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = vec![&self.input];
        p.extend(self.layer.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = vec![&mut self.input];
        p.extend(self.layer.params_mut());
        p
    }
}

pub fn random_tensor<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect()).unwrap()
}

/// Randomizes every trainable parameter (including zero-initialized ones)
/// so no gradient is trivially zero.
pub fn randomize_params<T: Scalar, M: Module<T>>(module: &mut M, rng: &mut Rng) {
    for p in module.params_mut() {
        if !p.trainable {
            continue;
        }
        let is_scale = p.name.ends_with(".gamma");
        for v in p.value.data_mut() {
            let r: f64 = rng.gen_range(-1.0..1.0);
            *v = T::from_f64(if is_scale { 1.0 + 0.5 * r } else { 0.5 * r });
        }
    }
}

/// Layer kinds covered by the randomized finite-difference trials.
pub const LAYER_KINDS: [&str; 8] = [
    "conv3x3",
    "conv_strided",
    "batchnorm",
    "relu",
    "maxpool2",
    "upsample2",
    "linear",
    "sigmoid",
];

/// One randomized finite-difference trial of layer `kind`, shapes up to 8x16x16.
pub fn layer_trial<T: Scalar>(kind: &str, seed: u64, step: f64) -> (String, GradCheckReport) {
    let mut rng = seeded(seed);
    let c = rng.gen_range(1..=8);
    let h = 2 * rng.gen_range(1..=8);
    let w = 2 * rng.gen_range(1..=8);
    let cfg = GradCheckConfig {
        step,
        ..GradCheckConfig::default()
    };
    macro_rules! run {
        ($layer:expr, $shape:expr) => {{
            let shape: Vec<usize> = $shape;
            let x = random_tensor::<T>(&shape, &mut rng);
            let mut layer = $layer;
            randomize_params::<T, _>(&mut layer, &mut rng);
            let mut harness = Harness::new(layer, x, &mut rng);
            let report = grad_check(&mut harness, |m, pass| m.objective(pass), &cfg);
            (format!("{kind} {shape:?}"), report)
        }};
    }
    match kind {
        "conv3x3" => {
            let cout = rng.gen_range(1..=8);
            run!(Conv2d::<T>::new("conv", c, cout, 3, 1, 1, true, &mut rng), vec![c, h, w])
        }
        "conv_strided" => {
            let cout = rng.gen_range(1..=8);
            let k = [1, 3][rng.gen_range(0..2)];
            run!(Conv2d::<T>::new("conv", c, cout, k, 2, k / 2, false, &mut rng), vec![c, h, w])
        }
        "batchnorm" => run!(BatchNorm2d::<T>::new("bn", c), vec![c, h, w]),
        "relu" => run!(PlainLayer(Relu::new()), vec![c, h, w]),
        "maxpool2" => run!(PlainLayer(MaxPool2::new()), vec![c, h, w]),
        "upsample2" => run!(PlainLayer(UpsampleNearest2::new()), vec![c, h / 2, w / 2]),
        "linear" => {
            let n = rng.gen_range(1..=16);
            let fin = rng.gen_range(1..=16);
            let fout = rng.gen_range(1..=16);
            run!(Linear::<T>::new("fc", fin, fout, &mut rng), vec![n, fin])
        }
        "sigmoid" => run!(PlainLayer(Sigmoid::new()), vec![c, h, w]),
        other => panic!("unknown layer kind {other}"),
    }
}

/// Parameterless layers as modules with no parameters of their own.
pub struct PlainLayer<L>(pub L);

impl<T: Scalar, L: LayerUnderTest<T>> LayerUnderTest<T> for PlainLayer<L> {
    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.0.forward(x)
    }
    fn backward(&mut self, g: &Tensor<T>) -> Tensor<T> {
        self.0.backward(g)
    }
    fn signature(&self) -> u64 {
        self.0.signature()
    }
}

impl<T: Scalar, L> Module<T> for PlainLayer<L> {
    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }
}

/// The whole trainable path: stacked image input through the extractor,
/// feature gathering, the evaluator and the weighted loss.
pub struct Composite<T> {
    pub input: Param<T>,
    pub model: FusionModel<T>,
    entries: Vec<ErmEntry>,
    labels: LabelSets,
    invert: bool,
}

impl<T: Scalar> Composite<T> {
    pub fn objective(&mut self, pass: Pass) -> Probe {
        let loss = if pass == Pass::Backward {
            let (l, g) = image_loss_input_grad(&mut self.model, &self.input.value, &self.entries, &self.labels, self.invert)
                .unwrap()
                .unwrap();
            let acc = self.input.grad.data_mut();
            for (a, v) in acc.iter_mut().zip(g.data()) {
                *a = *a + *v;
            }
            l.loss
        } else {
            image_loss(&mut self.model, &self.input.value, &self.entries, &self.labels, self.invert, false)
                .unwrap()
                .unwrap()
                .loss
        };
        Probe {
            loss,
            signature: self.model.kink_signature(),
        }
    }
}

impl<T: Scalar> Module<T> for Composite<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = vec![&self.input];
        p.extend(self.model.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = vec![&mut self.input];
        p.extend(self.model.params_mut());
        p
    }
}

pub fn random_composite<T: Scalar>(seed: u64) -> Composite<T> {
    random_composite_sized(seed, 2..=4, 2..=6)
}

/// Spatial size `4 * blocks`, channel counts drawn from `channels`.
pub fn random_composite_sized<T: Scalar>(
    seed: u64,
    blocks: std::ops::RangeInclusive<usize>,
    channels: std::ops::RangeInclusive<usize>,
) -> Composite<T> {
    let mut rng = seeded(seed);
    let h = 4 * rng.gen_range(blocks.clone());
    let w = 4 * rng.gen_range(blocks);
    let mut ch = || rng.gen_range(channels.clone());
    let c = ch();
    let extractor = ExtractorConfig {
        in_channels: 5,
        stem: ch(),
        down: [ch(), ch()],
        bottleneck: ch(),
        up: [ch(), ch()],
        feature_channels: c,
    };
    let evaluator = EvaluatorConfig {
        feature_channels: c,
        hidden: [ch() + 2, ch() + 2],
        d_max: 80.0,
    };
    let mut model = FusionModel::<T>::with_configs(extractor, evaluator, seed);
    randomize_params(&mut model, &mut rng);
    let image = Tensor::new(&[1, h, w], (0..h * w).map(|_| T::from_f64(rng.gen_range(0.0..1.0))).collect()).unwrap();
    let flow = random_tensor::<T>(&[2, h, w], &mut rng);
    let coords = make_coord_map::<T>(w, h).unwrap();
    let input = Tensor::concat_channels(&[&image, &flow, &coords]).unwrap();
    let n = rng.gen_range(2..12);
    let entries: Vec<ErmEntry> = (0..n)
        .map(|i| ErmEntry {
            index: i,
            pixel: Pixel::new(rng.gen_range(0..w), rng.gen_range(0..h)),
            depth: rng.gen_range(1.0..80.0),
            source: 0,
        })
        .collect();
    let mut labels = LabelSets::default();
    for i in 0..n {
        match (i, rng.gen_range(0..3)) {
            (0, _) | (_, 0) => labels.positives.push(i),
            (1, _) | (_, 1) => labels.negatives.push(i),
            _ => labels.unlabeled.push(i),
        }
    }
    Composite {
        input: Param::new("input", input),
        model,
        entries,
        labels,
        invert: rng.gen(),
    }
}

/// Finite-difference trial of the whole image-to-loss path on inputs of 4 or 8
/// pixels per side with 2 to 4 channels per layer.
pub fn composite_trial<T: Scalar>(seed: u64, cfg: &GradCheckConfig) -> (String, GradCheckReport) {
    let mut m = random_composite_sized::<T>(seed, 1..=2, 2..=4);
    let name = format!("image->loss {:?}", m.input.value.shape());
    let report = grad_check(&mut m, |m, pass| m.objective(pass), cfg);
    (name, report)
}
