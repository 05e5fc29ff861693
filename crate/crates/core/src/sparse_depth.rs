//! Sparse depth maps and the radar-map family built from them: the horizontal
//! radar map (RM), the upward-expanded radar map (ERM) and the subset of ERM
//! entries confirmed by LiDAR (PCRM).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{horizon_row, project_radar_horizontal, round_pixel, CameraIntrinsics, Pixel, RadarReturn};

/// Value stored at pixels without a measurement.
pub const NO_DEPTH: f32 = 0.0;

/// `width x height` grid of depths in meters, row-major, top row first.
/// Non-positive values mean "no measurement".
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepthMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl SparseDepthMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![NO_DEPTH; width * height],
        }
    }

    pub fn for_camera(cam: &CameraIntrinsics) -> Self {
        Self::empty(cam.width, cam.height)
    }

    /// Wraps raw values; non-finite and non-positive values become "no measurement".
    pub fn from_values(width: usize, height: usize, mut values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{} values for a {width}x{height} map",
                values.len()
            )));
        }
        for v in values.iter_mut() {
            if !(v.is_finite() && *v > 0.0) {
                *v = NO_DEPTH;
            }
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let v = self.values[y * self.width + x];
        (v > 0.0).then_some(v)
    }

    pub fn at(&self, p: Pixel) -> Option<f32> {
        self.get(p.x, p.y)
    }

    pub fn set(&mut self, p: Pixel, depth: f32) {
        debug_assert!(depth.is_finite() && depth > 0.0);
        self.values[p.y * self.width + p.x] = depth;
    }

    pub fn clear(&mut self, p: Pixel) {
        self.values[p.y * self.width + p.x] = NO_DEPTH;
    }

    /// Writes `depth` unless a smaller depth is already stored.
    pub fn set_min(&mut self, p: Pixel, depth: f32) {
        let slot = &mut self.values[p.y * self.width + p.x];
        if *slot <= 0.0 || depth < *slot {
            *slot = depth;
        }
    }

    pub fn is_measured(&self, p: Pixel) -> bool {
        self.values[p.y * self.width + p.x] > 0.0
    }

    pub fn measured_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.measured_count() == 0
    }

    /// Measured pixels in row-major order.
    pub fn measured(&self) -> impl Iterator<Item = (Pixel, f32)> + '_ {
        self.values.iter().enumerate().filter(|(_, &v)| v > 0.0).map(move |(i, &v)| {
            (Pixel::new(i % self.width, i / self.width), v)
        })
    }

    pub fn same_size(&self, other: &SparseDepthMap) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// One pixel of the expanded radar map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErmEntry {
    /// Position in the entry list (0-based).
    pub index: usize,
    pub pixel: Pixel,
    /// Range of the source return in meters.
    pub depth: f32,
    /// Index of the radar return the entry was expanded from.
    pub source: usize,
}

/// Positive / negative / unlabeled partition of ERM entry indices, each sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelSets {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Unlabeled,
}

impl LabelSets {
    pub fn labeled_count(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    /// Per-entry labels for `n` entries.
    pub fn labels(&self, n: usize) -> Vec<Label> {
        let mut out = vec![Label::Unlabeled; n];
        for &i in &self.positives {
            out[i] = Label::Positive;
        }
        for &i in &self.negatives {
            out[i] = Label::Negative;
        }
        out
    }
}

/// Absolute (meters) and relative depth-agreement thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchThresholds {
    pub t_abs: f64,
    pub t_rel: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        Self {
            t_abs: 1.0,
            t_rel: 0.01,
        }
    }
}

impl MatchThresholds {
    pub fn new(t_abs: f64, t_rel: f64) -> Result<Self> {
        if !(t_abs > 0.0) || !(t_rel > 0.0 && t_rel < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "thresholds need t_abs > 0 and 0 < t_rel < 1, got {t_abs}, {t_rel}"
            )));
        }
        Ok(Self { t_abs, t_rel })
    }

    /// Both differences strictly below their thresholds.
    pub fn matches(&self, lidar: f64, radar: f64) -> bool {
        let diff = (lidar - radar).abs();
        diff < self.t_abs && diff / lidar < self.t_rel
    }
}

/// What to do with ERM entries whose pixel has no LiDAR depth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum UncoveredPolicy {
    #[default]
    Exclude,
    Negative,
}

#[derive(Clone, Debug)]
pub struct RadarMap {
    pub map: SparseDepthMap,
    /// Returns whose column fell outside the image.
    pub dropped: usize,
}

/// Horizontal projection of every return; the nearer depth wins on collisions.
pub fn build_rm(returns: &[RadarReturn], cam: &CameraIntrinsics) -> Result<RadarMap> {
    let mut map = SparseDepthMap::for_camera(cam);
    let mut dropped = 0;
    for r in returns {
        match project_radar_horizontal(r, cam)? {
            Some(p) => map.set_min(p, r.z as f32),
            None => dropped += 1,
        }
    }
    Ok(RadarMap { map, dropped })
}

#[derive(Clone, Debug)]
pub struct ExpandedRadarMap {
    pub map: SparseDepthMap,
    pub entries: Vec<ErmEntry>,
    pub dropped: usize,
}

/// Expands each projectable return upward over `v` rows (the horizon row
/// included), clipped at the top border.
pub fn build_erm(returns: &[RadarReturn], cam: &CameraIntrinsics, v: usize) -> Result<ExpandedRadarMap> {
    if v == 0 {
        return Err(Error::InvalidArgument("expansion height must be at least 1".into()));
    }
    let mut map = SparseDepthMap::for_camera(cam);
    let mut entries = Vec::with_capacity(returns.len() * v);
    let mut dropped = 0;
    let v0 = horizon_row(cam, 0);
    for (source, r) in returns.iter().enumerate() {
        if !(r.z > 0.0) {
            return Err(Error::BehindCamera { z: r.z });
        }
        let u = round_pixel(cam.fx * r.x / r.z + cam.cx);
        if u < 0 || u as usize >= cam.width || v0 < 0 {
            dropped += 1;
            continue;
        }
        let depth = r.z as f32;
        for offset in 0..v as i64 {
            let row = v0 - offset;
            if row < 0 {
                break;
            }
            if row as usize >= cam.height {
                continue;
            }
            let pixel = Pixel::new(u as usize, row as usize);
            map.set_min(pixel, depth);
            entries.push(ErmEntry {
                index: entries.len(),
                pixel,
                depth,
                source,
            });
        }
    }
    Ok(ExpandedRadarMap {
        map,
        entries,
        dropped,
    })
}

#[derive(Clone, Debug)]
pub struct PcrmSelection {
    pub labels: LabelSets,
    pub pcrm: SparseDepthMap,
}

/// Labels every ERM entry against the LiDAR map and builds the PCRM from the positives.
pub fn select_pcrm(entries: &[ErmEntry], lm: &SparseDepthMap, th: &MatchThresholds) -> Result<PcrmSelection> {
    select_pcrm_with(entries, lm, th, UncoveredPolicy::Exclude)
}

pub fn select_pcrm_with(
    entries: &[ErmEntry],
    lm: &SparseDepthMap,
    th: &MatchThresholds,
    uncovered: UncoveredPolicy,
) -> Result<PcrmSelection> {
    let mut labels = LabelSets::default();
    let mut pcrm = SparseDepthMap::empty(lm.width(), lm.height());
    for e in entries {
        if e.pixel.x >= lm.width() || e.pixel.y >= lm.height() {
            return Err(Error::InvalidArgument(format!(
                "entry {} at {:?} outside the {}x{} LiDAR map",
                e.index,
                e.pixel,
                lm.width(),
                lm.height()
            )));
        }
        match lm.at(e.pixel) {
            Some(d_l) if th.matches(d_l as f64, e.depth as f64) => {
                labels.positives.push(e.index);
                pcrm.set_min(e.pixel, e.depth);
            }
            Some(_) => labels.negatives.push(e.index),
            None => match uncovered {
                UncoveredPolicy::Exclude => labels.unlabeled.push(e.index),
                UncoveredPolicy::Negative => labels.negatives.push(e.index),
            },
        }
    }
    labels.positives.sort_unstable();
    labels.negatives.sort_unstable();
    labels.unlabeled.sort_unstable();
    Ok(PcrmSelection { labels, pcrm })
}
