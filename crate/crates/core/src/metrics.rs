//! Depth errors evaluated on the pixels that carry a reference LiDAR depth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse_depth::SparseDepthMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rel: f64,
    pub rmse: f64,
    pub evaluated_pixel_count: usize,
}

/// MAE, mean relative error and RMSE of `pred` against every measured pixel of `lm`.
/// `pred` must cover all of those pixels.
pub fn evaluate(pred: &SparseDepthMap, lm: &SparseDepthMap) -> Result<MetricsReport> {
    if !pred.same_size(lm) {
        return Err(Error::InvalidArgument(format!(
            "prediction is {}x{} but reference is {}x{}",
            pred.width(),
            pred.height(),
            lm.width(),
            lm.height()
        )));
    }
    let mut abs = 0.0;
    let mut rel = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for (p, reference) in lm.measured() {
        let Some(estimate) = pred.at(p) else {
            return Err(Error::InvalidArgument(format!(
                "prediction has no depth at reference pixel ({}, {})",
                p.x, p.y
            )));
        };
        let r = reference as f64;
        let e = (estimate as f64 - r).abs();
        abs += e;
        rel += e / r;
        sq += e * e;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("reference map has no measured pixels".into()));
    }
    let count = n as f64;
    Ok(MetricsReport {
        mae: abs / count,
        rel: rel / count,
        rmse: (sq / count).sqrt(),
        evaluated_pixel_count: n,
    })
}

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting one half. `None` if either set is empty.
pub fn roc_auc(positive_scores: &[f64], negative_scores: &[f64]) -> Option<f64> {
    if positive_scores.is_empty() || negative_scores.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positive_scores
        .iter()
        .map(|&s| (s, true))
        .chain(negative_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // midranks over tied groups (Mann-Whitney U)
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let np = positive_scores.len() as f64;
    let nn = negative_scores.len() as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}
