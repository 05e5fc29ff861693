//! Training, EM inference and image-guided completion.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{class_weights, normalize_depth, weighted_bce_loss, ConsistencyEvaluator, EvaluatorConfig};
use crate::features::{ExtractorConfig, ExtractorInput, FeatureExtractor, FeatureMap};
use crate::geometry::{CameraIntrinsics, Pixel, RadarReturn};
use crate::image::{FlowField, GrayImage};
use crate::metrics::roc_auc;
use crate::nn::{seeded, sigmoid, AdamConfig, AdamState, Module, Param, Scalar, Tensor};
use crate::sparse_depth::{
    build_erm, select_pcrm_with, ErmEntry, ExpandedRadarMap, Label, LabelSets, MatchThresholds, SparseDepthMap,
    UncoveredPolicy,
};
use crate::synth::SyntheticFrame;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub thresholds: MatchThresholds,
    /// Rows of upward radar expansion.
    pub expansion_rows: usize,
    /// Acceptance threshold on evaluator probabilities.
    pub tau: f64,
    pub d_max: f64,
    pub invert_class_weights: bool,
    pub uncovered: UncoveredPolicy,
    /// Kernels are single-threaded either way; kept so configs state it explicitly.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            seed: 0,
            lr: 5e-5,
            thresholds: MatchThresholds::default(),
            expansion_rows: 60,
            tau: 0.5,
            d_max: 80.0,
            invert_class_weights: false,
            uncovered: UncoveredPolicy::Exclude,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.d_max.is_finite() && self.d_max > 0.0) {
            return bad(format!("d_max must be positive, got {}", self.d_max));
        }
        if self.expansion_rows == 0 {
            return bad("v must be at least 1".into());
        }
        MatchThresholds::new(self.thresholds.t_abs, self.thresholds.t_rel)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One camera frame with its sensor data.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub camera: CameraIntrinsics,
    pub image: GrayImage,
    pub flow: Option<FlowField>,
    pub radar: Vec<RadarReturn>,
    pub lidar: SparseDepthMap,
}

impl SceneData {
    pub fn from_frame(frame: &SyntheticFrame) -> Self {
        Self {
            camera: frame.scene.camera,
            image: frame.rendering.image.clone(),
            flow: Some(frame.rendering.flow.clone()),
            radar: frame.radar.returns.clone(),
            lidar: frame.lidar.clone(),
        }
    }

    pub fn extractor_input<T: Scalar>(&self) -> Result<ExtractorInput<T>> {
        let (w, h) = (self.camera.width, self.camera.height);
        if self.image.width() != w || self.image.height() != h || self.lidar.width() != w || self.lidar.height() != h {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} / LiDAR {}x{} do not match the {w}x{h} camera",
                self.image.width(),
                self.image.height(),
                self.lidar.width(),
                self.lidar.height()
            )));
        }
        ExtractorInput::new(self.image.to_tensor(), self.flow.as_ref().map(|f| f.to_tensor()))
    }
}

/// Feature extractor followed by the consistency evaluator.
#[derive(Clone, Debug)]
pub struct FusionModel<T> {
    pub extractor: FeatureExtractor<T>,
    pub evaluator: ConsistencyEvaluator<T>,
}

impl<T: Scalar> FusionModel<T> {
    pub fn new(seed: u64, d_max: f64) -> Self {
        let extractor = ExtractorConfig::default();
        let evaluator = EvaluatorConfig {
            feature_channels: extractor.feature_channels,
            d_max,
            ..EvaluatorConfig::default()
        };
        Self::with_configs(extractor, evaluator, seed)
    }

    pub fn with_configs(extractor: ExtractorConfig, evaluator: EvaluatorConfig, seed: u64) -> Self {
        assert_eq!(extractor.feature_channels, evaluator.feature_channels);
        let mut rng = seeded(seed);
        Self {
            extractor: FeatureExtractor::new(extractor, &mut rng),
            evaluator: ConsistencyEvaluator::new(evaluator, &mut rng),
        }
    }

    pub fn d_max(&self) -> f64 {
        self.evaluator.config().d_max
    }

    pub fn feature_channels(&self) -> usize {
        self.extractor.feature_channels()
    }

    /// Probability for every entry, in entry order.
    pub fn score(&mut self, input: &ExtractorInput<T>, entries: &[ErmEntry]) -> Result<Vec<f64>> {
        if entries.is_empty() {
            return Ok(Vec::new());
        }
        let features = self.extractor.extract(input)?;
        let rows = gather_rows(&features, entries.iter(), self.d_max())?;
        let logits = self.evaluator.forward_logits(&rows)?;
        Ok(logits.iter().map(|l| sigmoid(l.into_f64())).collect())
    }
}

impl<T: Scalar> Module<T> for FusionModel<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.extractor.params();
        p.extend(self.evaluator.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.extractor.params_mut();
        p.extend(self.evaluator.params_mut());
        p
    }

    fn set_training(&mut self, training: bool) {
        self.extractor.set_training(training);
        self.evaluator.set_training(training);
    }

    fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        h.write_u64(self.extractor.kink_signature());
        h.write_u64(self.evaluator.kink_signature());
        h.finish()
    }
}

/// `(N, c + 1)` rows of `[F(pixel), depth / d_max]`.
fn gather_rows<'a, T: Scalar>(
    features: &FeatureMap<T>,
    entries: impl Iterator<Item = &'a ErmEntry>,
    d_max: f64,
) -> Result<Tensor<T>> {
    let c = features.channels();
    let mut data = Vec::new();
    let mut n = 0;
    for e in entries {
        if e.pixel.x >= features.width() || e.pixel.y >= features.height() {
            return Err(Error::InvalidArgument(format!("entry {} at {:?} outside the feature map", e.index, e.pixel)));
        }
        data.extend(features.at(e.pixel));
        data.push(T::from_f64(normalize_depth(e.depth as f64, d_max)));
        n += 1;
    }
    Tensor::new(&[n, c + 1], data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageLoss {
    pub loss: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Weighted BCE of one image over its labeled entries; with `backward` the
/// gradients are accumulated into every parameter of `model`. `None` when the
/// image has no labeled entry.
pub fn image_loss<T: Scalar>(
    model: &mut FusionModel<T>,
    stacked_input: &Tensor<T>,
    entries: &[ErmEntry],
    labels: &LabelSets,
    invert_class_weights: bool,
    backward: bool,
) -> Result<Option<ImageLoss>> {
    let mode = if backward { Backprop::Params } else { Backprop::None };
    Ok(image_loss_impl(model, stacked_input, entries, labels, invert_class_weights, mode)?.map(|(l, _)| l))
}

/// [`image_loss`] with backpropagation, also returning the gradient with
/// respect to the stacked network input.
pub fn image_loss_input_grad<T: Scalar>(
    model: &mut FusionModel<T>,
    stacked_input: &Tensor<T>,
    entries: &[ErmEntry],
    labels: &LabelSets,
    invert_class_weights: bool,
) -> Result<Option<(ImageLoss, Tensor<T>)>> {
    let out = image_loss_impl(model, stacked_input, entries, labels, invert_class_weights, Backprop::Input)?;
    Ok(out.map(|(l, g)| (l, g.expect("input gradient requested"))))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Backprop {
    None,
    Params,
    Input,
}

fn image_loss_impl<T: Scalar>(
    model: &mut FusionModel<T>,
    stacked_input: &Tensor<T>,
    entries: &[ErmEntry],
    labels: &LabelSets,
    invert_class_weights: bool,
    mode: Backprop,
) -> Result<Option<(ImageLoss, Option<Tensor<T>>)>> {
    let (n_pos, n_neg) = (labels.positives.len(), labels.negatives.len());
    if n_pos + n_neg == 0 {
        return Ok(None);
    }
    let (w_pos, w_neg) = class_weights(n_pos, n_neg, invert_class_weights)?;
    let per_entry = labels.labels(entries.len());
    let labeled: Vec<(&ErmEntry, bool)> = entries
        .iter()
        .filter_map(|e| match per_entry[e.index] {
            Label::Positive => Some((e, true)),
            Label::Negative => Some((e, false)),
            Label::Unlabeled => None,
        })
        .collect();

    let features = model.extractor.forward(stacked_input)?;
    let rows = gather_rows(&features, labeled.iter().map(|(e, _)| *e), model.d_max())?;
    let logits = model.evaluator.forward_logits(&rows)?;
    let probs: Vec<f64> = logits.iter().map(|l| sigmoid(l.into_f64())).collect();
    let targets: Vec<f64> = labeled.iter().map(|(_, y)| if *y { 1.0 } else { 0.0 }).collect();
    let weights: Vec<f64> = labeled.iter().map(|(_, y)| if *y { w_pos } else { w_neg }).collect();
    let bce = weighted_bce_loss(&probs, &targets, &weights)?;

    let mut input_grad = None;
    if mode != Backprop::None {
        let logit_grads: Vec<T> = bce.logit_grads.iter().map(|&g| T::from_f64(g)).collect();
        let row_grads = model.evaluator.backward(&logit_grads)?;
        let c = features.channels();
        let (h, w) = (features.height(), features.width());
        let mut fgrad = Tensor::<T>::zeros(&[c, h, w]);
        let g = fgrad.data_mut();
        for (row, (e, _)) in row_grads.data().chunks_exact(c + 1).zip(&labeled) {
            for (k, &v) in row[..c].iter().enumerate() {
                let idx = (k * h + e.pixel.y) * w + e.pixel.x;
                g[idx] = g[idx] + v;
            }
        }
        input_grad = model.extractor.backward(&fgrad, mode == Backprop::Input)?;
    }
    let loss = ImageLoss {
        loss: bce.loss,
        positives: n_pos,
        negatives: n_neg,
    };
    Ok(Some((loss, input_grad)))
}

/// A scene reduced to what training needs: stacked network input, ERM entries and their labels.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub input: Tensor<f32>,
    pub erm: ExpandedRadarMap,
    pub labels: LabelSets,
}

pub fn prepare_scene(scene: &SceneData, cfg: &TrainConfig) -> Result<PreparedScene> {
    let input = scene.extractor_input::<f32>()?.stacked()?;
    let erm = build_erm(&scene.radar, &scene.camera, cfg.expansion_rows)?;
    let labels = select_pcrm_with(&erm.entries, &scene.lidar, &cfg.thresholds, cfg.uncovered)?.labels;
    Ok(PreparedScene { input, erm, labels })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-image summed loss over trained images.
    pub loss: f64,
    pub trained: usize,
    pub skipped: usize,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: FusionModel<f32>,
    pub history: Vec<EpochLog>,
}

/// Trains a fresh model, one Adam step per image, images visited in a seeded
/// shuffle each epoch. `on_epoch` sees every epoch log as it completes.
pub fn train(
    train_set: &[SceneData],
    val_set: &[SceneData],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Trained> {
    cfg.validate()?;
    let prepared: Vec<PreparedScene> = train_set.iter().map(|s| prepare_scene(s, cfg)).collect::<Result<_>>()?;
    let val: Vec<PreparedScene> = val_set.iter().map(|s| prepare_scene(s, cfg)).collect::<Result<_>>()?;
    let model = FusionModel::new(cfg.seed, cfg.d_max);
    train_prepared(model, &prepared, &val, cfg, on_epoch)
}

/// [`train`] starting from `model` on already prepared scenes.
pub fn train_prepared(
    mut model: FusionModel<f32>,
    prepared: &[PreparedScene],
    val: &[PreparedScene],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Trained> {
    cfg.validate()?;
    if prepared.is_empty() {
        return Err(Error::NoSupervision("training set is empty".into()));
    }
    let mut adam = AdamState::new(&model.params(), cfg.adam());
    let mut order_rng = seeded(cfg.seed.wrapping_add(0x5EED));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        model.set_training(true);
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut trained = 0;
        let mut skipped = 0;
        for &i in &order {
            let p = &prepared[i];
            model.zero_grad();
            match image_loss(&mut model, &p.input, &p.erm.entries, &p.labels, cfg.invert_class_weights, true)? {
                Some(l) => {
                    adam.step(&mut model.params_mut())?;
                    total += l.loss;
                    trained += 1;
                }
                None => skipped += 1,
            }
        }
        if trained == 0 {
            return Err(Error::NoSupervision(format!(
                "epoch {epoch}: all {skipped} images have no labeled radar entries"
            )));
        }
        let log = EpochLog {
            epoch,
            loss: total / trained as f64,
            trained,
            skipped,
            val_auc: validation_auc(&mut model, val)?,
        };
        on_epoch(&log);
        history.push(log);
    }
    model.set_training(false);
    Ok(Trained { model, history })
}

/// Scores of labeled entries split by class, model in inference mode.
pub fn labeled_scores(model: &mut FusionModel<f32>, scenes: &[PreparedScene]) -> Result<(Vec<f64>, Vec<f64>)> {
    model.set_training(false);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for s in scenes {
        if s.labels.labeled_count() == 0 {
            continue;
        }
        let features = model.extractor.forward(&s.input)?;
        let rows = gather_rows(&features, s.erm.entries.iter(), model.d_max())?;
        let logits = model.evaluator.forward_logits(&rows)?;
        for (e, label) in s.erm.entries.iter().zip(s.labels.labels(s.erm.entries.len())) {
            let p = sigmoid(logits[e.index].into_f64());
            match label {
                Label::Positive => pos.push(p),
                Label::Negative => neg.push(p),
                Label::Unlabeled => {}
            }
        }
    }
    Ok((pos, neg))
}

fn validation_auc(model: &mut FusionModel<f32>, val: &[PreparedScene]) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let (pos, neg) = labeled_scores(model, val)?;
    model.set_training(true);
    Ok(roc_auc(&pos, &neg))
}

/// Sparse EM with the probability that admitted each pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatedMap {
    pub map: SparseDepthMap,
    /// Row-major; 0 where the map has no depth.
    pub probability: Vec<f32>,
}

impl EstimatedMap {
    pub fn probability_at(&self, p: Pixel) -> Option<f32> {
        self.map.is_measured(p).then(|| self.probability[p.y * self.map.width() + p.x])
    }
}

/// Admits every entry with probability above `tau`. On a shared pixel the more
/// probable entry wins, equal probabilities going to the smaller depth.
pub fn assemble_em(entries: &[ErmEntry], probs: &[f64], tau: f64, width: usize, height: usize) -> Result<EstimatedMap> {
    if entries.len() != probs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} entries but {} probabilities",
            entries.len(),
            probs.len()
        )));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")));
    }
    let mut map = SparseDepthMap::empty(width, height);
    let mut best = vec![f64::NEG_INFINITY; width * height];
    for (e, &p) in entries.iter().zip(probs) {
        if !(p > tau) {
            continue;
        }
        let i = e.pixel.y * width + e.pixel.x;
        let replace = match map.at(e.pixel) {
            None => true,
            Some(d) => p > best[i] || (p == best[i] && e.depth < d),
        };
        if replace {
            best[i] = p;
            map.set(e.pixel, e.depth);
        }
    }
    let probability = best
        .iter()
        .map(|&p| if p.is_finite() { p as f32 } else { 0.0 })
        .collect();
    Ok(EstimatedMap { map, probability })
}

/// ERM of a scene and the evaluator probability of each of its entries.
pub fn score_scene(
    model: &mut FusionModel<f32>,
    scene: &SceneData,
    expansion_rows: usize,
) -> Result<(ExpandedRadarMap, Vec<f64>)> {
    model.set_training(false);
    let erm = build_erm(&scene.radar, &scene.camera, expansion_rows)?;
    let input = scene.extractor_input::<f32>()?;
    let probs = model.score(&input, &erm.entries)?;
    Ok((erm, probs))
}

pub fn infer_em(model: &mut FusionModel<f32>, scene: &SceneData, expansion_rows: usize, tau: f64) -> Result<EstimatedMap> {
    let (erm, probs) = score_scene(model, scene, expansion_rows)?;
    assemble_em(&erm.entries, &probs, tau, scene.camera.width, scene.camera.height)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub neighbors: usize,
    /// Spatial bandwidth in pixels.
    pub sigma_spatial: f64,
    /// Intensity bandwidth on the `[0, 1]` scale.
    pub sigma_intensity: f64,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            neighbors: 16,
            sigma_spatial: 16.0,
            sigma_intensity: 0.1,
        }
    }
}

pub fn complete_depth(sparse: &SparseDepthMap, image: &GrayImage) -> Result<SparseDepthMap> {
    complete_depth_with(sparse, image, &CompletionParams::default())
}

/// Cross-bilateral interpolation of every empty pixel from its nearest
/// measured pixels; measured pixels are copied unchanged.
pub fn complete_depth_with(sparse: &SparseDepthMap, image: &GrayImage, params: &CompletionParams) -> Result<SparseDepthMap> {
    let (w, h) = (sparse.width(), sparse.height());
    if image.width() != w || image.height() != h {
        return Err(Error::InvalidArgument(format!(
            "image is {}x{} but depth map is {w}x{h}",
            image.width(),
            image.height()
        )));
    }
    if sparse.is_empty() {
        return Err(Error::InvalidArgument("cannot complete a depth map without measurements".into()));
    }
    if params.neighbors == 0 || !(params.sigma_spatial > 0.0) || !(params.sigma_intensity > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid completion parameters {params:?}")));
    }
    let grid = PointGrid::new(sparse);
    let two_ss = 2.0 * params.sigma_spatial * params.sigma_spatial;
    let two_si = 2.0 * params.sigma_intensity * params.sigma_intensity;
    let mut out = sparse.values().to_vec();
    let mut scratch = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if sparse.get(x, y).is_some() {
                continue;
            }
            grid.nearest(x, y, params.neighbors, &mut scratch);
            let iq = image.intensity(x, y);
            let mut num = 0.0;
            let mut den = 0.0;
            for n in &scratch {
                let di = iq - image.intensity(n.x, n.y);
                let wk = (-(n.dist2 as f64) / two_ss).exp() * (-(di * di) / two_si).exp();
                num += wk * n.depth as f64;
                den += wk;
            }
            out[y * w + x] = if den > 0.0 { (num / den) as f32 } else { scratch[0].depth };
        }
    }
    SparseDepthMap::from_values(w, h, out)
}

#[derive(Clone, Copy, Debug)]
struct Neighbor {
    dist2: u64,
    x: usize,
    y: usize,
    depth: f32,
}

/// Uniform bucket grid over measured pixels for k-nearest queries.
struct PointGrid {
    cell: usize,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<(usize, usize, f32)>>,
}

impl PointGrid {
    const CELL: usize = 16;

    fn new(map: &SparseDepthMap) -> Self {
        let cell = Self::CELL;
        let cols = map.width().div_ceil(cell);
        let rows = map.height().div_ceil(cell);
        let mut buckets = vec![Vec::new(); cols * rows];
        for (p, d) in map.measured() {
            buckets[(p.y / cell) * cols + p.x / cell].push((p.x, p.y, d));
        }
        Self { cell, cols, rows, buckets }
    }

    /// The `k` nearest points to `(x, y)` (fewer if the map has fewer), sorted
    /// by distance then row then column.
    fn nearest(&self, x: usize, y: usize, k: usize, out: &mut Vec<Neighbor>) {
        out.clear();
        let (cx, cy) = ((x / self.cell) as i64, (y / self.cell) as i64);
        let max_ring = self.cols.max(self.rows) as i64;
        for ring in 0..=max_ring {
            for gy in cy - ring..=cy + ring {
                for gx in cx - ring..=cx + ring {
                    let on_ring = (gy - cy).abs() == ring || (gx - cx).abs() == ring;
                    if !on_ring || gx < 0 || gy < 0 || gx >= self.cols as i64 || gy >= self.rows as i64 {
                        continue;
                    }
                    for &(px, py, d) in &self.buckets[gy as usize * self.cols + gx as usize] {
                        let dx = px.abs_diff(x) as u64;
                        let dy = py.abs_diff(y) as u64;
                        out.push(Neighbor {
                            dist2: dx * dx + dy * dy,
                            x: px,
                            y: py,
                            depth: d,
                        });
                    }
                }
            }
            // every point outside the visited rings is at least `ring * cell` away
            if out.len() >= k {
                out.sort_unstable_by_key(|n| (n.dist2, n.y, n.x));
                let reach = (ring as u64) * self.cell as u64;
                if out[k - 1].dist2 < reach * reach {
                    break;
                }
            }
        }
        out.sort_unstable_by_key(|n| (n.dist2, n.y, n.x));
        out.truncate(k);
    }
}
