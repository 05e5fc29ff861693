//! Image-depth consistency evaluation: an MLP scoring whether a radar depth is
//! plausible at a pixel given that pixel's image features, and the
//! class-weighted binary cross-entropy it is trained with.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Linear, Module, Param, Relu, Rng, Scalar, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorConfig {
    pub feature_channels: usize,
    pub hidden: [usize; 2],
    /// Depths are divided by this before entering the network.
    pub d_max: f64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            feature_channels: 32,
            hidden: [64, 64],
            d_max: 80.0,
        }
    }
}

/// Depth scaled into `[0, 1]`.
pub fn normalize_depth(depth: f64, d_max: f64) -> f64 {
    (depth / d_max).clamp(0.0, 1.0)
}

/// `h([v, s])`: `(c + 1) -> 64 -> ReLU -> 64 -> ReLU -> 1 -> sigmoid`.
///
/// The output layer starts at zero, so an untrained evaluator answers 0.5 everywhere.
#[derive(Clone, Debug)]
pub struct ConsistencyEvaluator<T> {
    config: EvaluatorConfig,
    fc1: Linear<T>,
    relu1: Relu,
    fc2: Linear<T>,
    relu2: Relu,
    out: Linear<T>,
}

impl<T: Scalar> ConsistencyEvaluator<T> {
    pub fn new(config: EvaluatorConfig, rng: &mut Rng) -> Self {
        let inputs = config.feature_channels + 1;
        Self {
            fc1: Linear::new("evaluator.fc1", inputs, config.hidden[0], rng),
            relu1: Relu::new(),
            fc2: Linear::new("evaluator.fc2", config.hidden[0], config.hidden[1], rng),
            relu2: Relu::new(),
            out: Linear::zeroed("evaluator.out", config.hidden[1], 1),
            config,
        }
    }

    pub fn config(&self) -> &EvaluatorConfig {
        &self.config
    }

    /// Pre-sigmoid scores for a batch of `[v, s]` rows, shape `(N, c + 1)`.
    pub fn forward_logits(&mut self, batch: &Tensor<T>) -> Result<Vec<T>> {
        let (_, f) = batch.dims2("evaluator")?;
        if f != self.config.feature_channels + 1 {
            return Err(Error::shape(
                "evaluator",
                format!(
                    "expected {} features plus depth, got {} columns",
                    self.config.feature_channels, f
                ),
            ));
        }
        let h = self.fc1.forward(batch)?;
        let h = self.relu1.forward(&h);
        let h = self.fc2.forward(&h)?;
        let h = self.relu2.forward(&h);
        Ok(self.out.forward(&h)?.into_data())
    }

    /// Gradient w.r.t. the `(N, c + 1)` input given logit gradients.
    pub fn backward(&mut self, logit_grads: &[T]) -> Result<Tensor<T>> {
        let g = Tensor::new(&[logit_grads.len(), 1], logit_grads.to_vec())?;
        let g = self.out.backward(&g)?;
        let g = self.relu2.backward(&g)?;
        let g = self.fc2.backward(&g)?;
        let g = self.relu1.backward(&g)?;
        self.fc1.backward(&g)
    }

    /// Probability that `depth` (meters) is observed at a pixel with features `v`.
    pub fn evaluate(&mut self, v: &[T], depth: f64) -> Result<f64> {
        let mut row = v.to_vec();
        row.push(T::from_f64(normalize_depth(depth, self.config.d_max)));
        let n = row.len();
        let logits = self.forward_logits(&Tensor::new(&[1, n], row)?)?;
        Ok(sigmoid(logits[0].into_f64()))
    }
}

impl<T: Scalar> Module<T> for ConsistencyEvaluator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p.extend(self.out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p.extend(self.out.params_mut());
        p
    }

    fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.relu1.hash_branch(&mut h);
        self.relu2.hash_branch(&mut h);
        h.finish()
    }
}

/// Per-class loss weights `(w_pos, w_neg)`.
///
/// As printed: `w_pos = n_pos / (n_pos + n_neg)` and `w_neg = n_neg / (n_pos + n_neg)`.
/// `invert` swaps them, giving the usual inverse-frequency correction.
pub fn class_weights(n_pos: usize, n_neg: usize, invert: bool) -> Result<(f64, f64)> {
    let total = n_pos + n_neg;
    if total == 0 {
        return Err(Error::NoSupervision("no positive or negative entries".into()));
    }
    let w_pos = n_pos as f64 / total as f64;
    let w_neg = n_neg as f64 / total as f64;
    Ok(if invert { (w_neg, w_pos) } else { (w_pos, w_neg) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BceOutput {
    pub loss: f64,
    /// `d loss / d logit_e = w_e (p_e - y_e)`.
    pub logit_grads: Vec<f64>,
}

/// `sum_e w_e (-y_e ln p_e - (1 - y_e) ln(1 - p_e))` with clamped probabilities.
pub fn weighted_bce_loss(probs: &[f64], targets: &[f64], weights: &[f64]) -> Result<BceOutput> {
    if probs.len() != targets.len() || probs.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "loss inputs differ in length: {} probabilities, {} targets, {} weights",
            probs.len(),
            targets.len(),
            weights.len()
        )));
    }
    let mut loss = 0.0;
    let mut logit_grads = Vec::with_capacity(probs.len());
    for ((&p, &y), &w) in probs.iter().zip(targets).zip(weights) {
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss += w * (-y * pc.ln() - (1.0 - y) * (1.0 - pc).ln());
        logit_grads.push(w * (p - y));
    }
    Ok(BceOutput { loss, logit_grads })
}
