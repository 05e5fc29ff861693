//! On-disk formats: SDM1/SDM2 depth and flow rasters, PGM/PPM images, point
//! text files, scene metadata, checkpoints and run configs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::EvaluatorConfig;
use crate::features::ExtractorConfig;
use crate::geometry::{project_point, CameraIntrinsics, CameraPoint3D, RadarReturn};
use crate::image::{FlowField, GrayImage};
use crate::nn::{Module, ModelParams, Tensor};
use crate::pipeline::{FusionModel, SceneData, TrainConfig};
use crate::sparse_depth::{MatchThresholds, SparseDepthMap, UncoveredPolicy};
use crate::synth::{ReturnTruth, Scene, SensorSuite, SyntheticFrame};

pub const DEPTH_MAGIC: &[u8; 4] = b"SDM1";
pub const FLOW_MAGIC: &[u8; 4] = b"SDM2";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn malformed(path: &Path, detail: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Little-endian cursor that reports truncation against a file path.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            malformed(
                self.path,
                format!("truncated: needed {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.bytes.get(..4);
        if found != Some(&expected[..]) {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                expected: String::from_utf8_lossy(expected).into_owned(),
            });
        }
        self.pos = 4;
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| malformed(self.path, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn raster_bytes(magic: &[u8; 4], width: usize, height: usize, planes: &[&[f32]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * width * height * planes.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for plane in planes {
        for v in plane.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn parse_raster(bytes: &[u8], path: &Path, magic: &[u8; 4], planes: usize) -> Result<(usize, usize, Vec<f32>)> {
    let mut r = Reader::new(bytes, path);
    r.magic(magic)?;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(planes))
        .ok_or_else(|| malformed(path, "raster size overflows"))?;
    if r.remaining() != count * 4 {
        return Err(malformed(
            path,
            format!("{width}x{height}x{planes} raster needs {} payload bytes, found {}", count * 4, r.remaining()),
        ));
    }
    Ok((width, height, r.f32s(count)?))
}

/// SDM1: magic, u32 width, u32 height, row-major f32 depths; `<= 0` is no measurement.
pub fn encode_depth(map: &SparseDepthMap) -> Vec<u8> {
    raster_bytes(DEPTH_MAGIC, map.width(), map.height(), &[map.values()])
}

pub fn decode_depth(bytes: &[u8], path: &Path) -> Result<SparseDepthMap> {
    let (w, h, values) = parse_raster(bytes, path, DEPTH_MAGIC, 1)?;
    SparseDepthMap::from_values(w, h, values).map_err(|e| malformed(path, e.to_string()))
}

pub fn read_depth(path: &Path) -> Result<SparseDepthMap> {
    decode_depth(&read_bytes(path)?, path)
}

pub fn write_depth(path: &Path, map: &SparseDepthMap) -> Result<()> {
    write_bytes(path, &encode_depth(map))
}

/// SDM2: the SDM1 layout with two planes, x displacement first.
pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    raster_bytes(FLOW_MAGIC, flow.width(), flow.height(), &[flow.dx(), flow.dy()])
}

pub fn decode_flow(bytes: &[u8], path: &Path) -> Result<FlowField> {
    let (w, h, mut values) = parse_raster(bytes, path, FLOW_MAGIC, 2)?;
    let dy = values.split_off(w * h);
    FlowField::new(w, h, values, dy).map_err(|e| malformed(path, e.to_string()))
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    decode_flow(&read_bytes(path)?, path)
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    write_bytes(path, &encode_flow(flow))
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.pixels());
    out
}

/// Binary PGM with maxval 255; `#` comments in the header are skipped.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "P5".into(),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(path, "bad PGM header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(malformed(path, format!("only maxval 255 is supported, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let pixels = bytes.get(pos..).unwrap_or_default();
    if pixels.len() != width * height {
        return Err(malformed(
            path,
            format!("{width}x{height} image needs {} pixels, found {}", width * height, pixels.len()),
        ));
    }
    GrayImage::new(width, height, pixels.to_vec())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&read_bytes(path)?, path)
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    write_bytes(path, &encode_pgm(image))
}

/// Depth display range; values are mapped linearly in inverse depth so near is bright.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderRange {
    pub min: f64,
    pub max: f64,
}

impl Default for RenderRange {
    fn default() -> Self {
        Self { min: 1.0, max: 80.0 }
    }
}

impl RenderRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min > 0.0 && max > min && max.is_finite()) {
            return Err(Error::InvalidArgument(format!("render range needs 0 < min < max, got [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }

    /// 255 at `min` (and nearer), 0 at `max` (and farther).
    pub fn level(&self, depth: f64) -> u8 {
        let t = (1.0 / depth - 1.0 / self.max) / (1.0 / self.min - 1.0 / self.max);
        (t.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

/// Grayscale rendering; pixels without depth are black.
pub fn render_depth_pgm(map: &SparseDepthMap, range: &RenderRange) -> Vec<u8> {
    let pixels = map
        .values()
        .iter()
        .map(|&d| if d > 0.0 { range.level(d as f64) } else { 0 })
        .collect();
    encode_pgm(&GrayImage::new(map.width(), map.height(), pixels).expect("map dimensions"))
}

/// Gray RGB rendering; pixels without depth are pure red.
pub fn render_depth_ppm(map: &SparseDepthMap, range: &RenderRange) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    for &d in map.values() {
        if d > 0.0 {
            let g = range.level(d as f64);
            out.extend_from_slice(&[g, g, g]);
        } else {
            out.extend_from_slice(&[255, 0, 0]);
        }
    }
    out
}

/// Splits a point file into numeric rows, dropping comments and blank lines.
fn parse_rows(text: &str, path: &Path, arity: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let content = line.split('#').next().unwrap_or_default().trim();
        if content.is_empty() {
            continue;
        }
        let values: Vec<f64> = content
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| malformed(path, format!("line {}: not a number list: {content:?}", n + 1)))?;
        if values.len() != arity {
            return Err(malformed(path, format!("line {}: expected {arity} values, got {}", n + 1, values.len())));
        }
        let z = values[arity - 1];
        if !(z > 0.0) || values.iter().any(|v| !v.is_finite()) {
            return Err(malformed(path, format!("line {}: Z must be positive and finite, got {z}", n + 1)));
        }
        rows.push(values);
    }
    Ok(rows)
}

/// `X Y Z` lines, one per measured pixel, back-projected through `cam`.
pub fn encode_lidar(map: &SparseDepthMap, cam: &CameraIntrinsics) -> String {
    let mut out = String::from("# X Y Z (meters, camera frame)\n");
    for (p, d) in map.measured() {
        let q = cam.backproject(p.x as f64, p.y as f64, d as f64);
        out.push_str(&format!("{} {} {}\n", q.x, q.y, q.z));
    }
    out
}

/// Projects `X Y Z` lines into a map; the nearer point wins on a shared pixel
/// and points outside the image are ignored.
pub fn decode_lidar(text: &str, path: &Path, cam: &CameraIntrinsics) -> Result<SparseDepthMap> {
    let mut map = SparseDepthMap::for_camera(cam);
    for row in parse_rows(text, path, 3)? {
        let p = CameraPoint3D::new(row[0], row[1], row[2]);
        if let Some(px) = project_point(&p, cam)? {
            map.set_min(px, p.z as f32);
        }
    }
    Ok(map)
}

pub fn read_lidar(path: &Path, cam: &CameraIntrinsics) -> Result<SparseDepthMap> {
    decode_lidar(&read_text(path)?, path, cam)
}

pub fn encode_radar(returns: &[RadarReturn]) -> String {
    let mut out = String::from("# X Z (meters, camera frame; no elevation)\n");
    for r in returns {
        out.push_str(&format!("{} {}\n", r.x, r.z));
    }
    out
}

pub fn decode_radar(text: &str, path: &Path) -> Result<Vec<RadarReturn>> {
    Ok(parse_rows(text, path, 2)?
        .into_iter()
        .map(|r| RadarReturn::new(r[0], r[1]))
        .collect())
}

pub fn read_radar(path: &Path) -> Result<Vec<RadarReturn>> {
    decode_radar(&read_text(path)?, path)
}

/// Contents of a scene directory's `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub camera: CameraIntrinsics,
    /// CRC32 of the serialized scene description.
    pub scene_hash: String,
    pub sensors: SensorSuite,
    /// True reflection point of every line of `radar.txt`, in order.
    pub elevation_record: Vec<ReturnTruth>,
    pub scene: Scene,
}

impl SceneMeta {
    pub fn from_frame(frame: &SyntheticFrame, sensors: &SensorSuite) -> Result<Self> {
        Ok(Self {
            seed: frame.scene.seed,
            camera: frame.scene.camera,
            scene_hash: scene_hash(&frame.scene)?,
            sensors: sensors.clone(),
            elevation_record: frame.radar.truth.clone(),
            scene: frame.scene.clone(),
        })
    }
}

pub fn scene_hash(scene: &Scene) -> Result<String> {
    Ok(format!("{:08x}", crc32fast::hash(&serde_json::to_vec(scene)?)))
}

pub mod scene_files {
    pub const IMAGE: &str = "image.pgm";
    pub const FLOW: &str = "flow.sdm2";
    pub const GROUND_TRUTH: &str = "gt.sdm1";
    pub const LIDAR: &str = "lidar.txt";
    pub const RADAR: &str = "radar.txt";
    pub const META: &str = "meta.json";
}

pub fn write_scene_dir(dir: &Path, frame: &SyntheticFrame, sensors: &SensorSuite) -> Result<()> {
    use scene_files::*;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cam = &frame.scene.camera;
    write_pgm(&dir.join(IMAGE), &frame.rendering.image)?;
    write_flow(&dir.join(FLOW), &frame.rendering.flow)?;
    write_depth(&dir.join(GROUND_TRUTH), &frame.rendering.depth)?;
    write_bytes(&dir.join(LIDAR), encode_lidar(&frame.lidar, cam).as_bytes())?;
    write_bytes(&dir.join(RADAR), encode_radar(&frame.radar.returns).as_bytes())?;
    let mut meta = serde_json::to_vec_pretty(&SceneMeta::from_frame(frame, sensors)?)?;
    meta.push(b'\n');
    write_bytes(&dir.join(META), &meta)
}

pub fn read_meta(dir: &Path) -> Result<SceneMeta> {
    let path = dir.join(scene_files::META);
    serde_json::from_slice(&read_bytes(&path)?).map_err(|e| malformed(&path, e.to_string()))
}

/// Loads a scene directory; a missing flow file means zero flow.
pub fn load_scene_dir(dir: &Path) -> Result<SceneData> {
    use scene_files::*;
    let meta = read_meta(dir)?;
    let camera = meta.camera;
    camera.validate()?;
    let image = read_pgm(&dir.join(IMAGE))?;
    let flow_path = dir.join(FLOW);
    let flow = if flow_path.exists() {
        Some(read_flow(&flow_path)?)
    } else {
        None
    };
    Ok(SceneData {
        camera,
        image,
        flow,
        radar: read_radar(&dir.join(RADAR))?,
        lidar: read_lidar(&dir.join(LIDAR), &camera)?,
    })
}

/// Scene subdirectories (those holding `meta.json`) in name order.
pub fn dataset_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(scene_files::META).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(malformed(root, "no scene directories with meta.json"));
    }
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<SceneData>> {
    dataset_dirs(root)?.iter().map(|d| load_scene_dir(d)).collect()
}

/// Magic, version, `d_max`, feature channels, then every parameter as
/// name length, name, rank, dims and f32 data; CRC32 of all of it last.
pub fn encode_checkpoint(model: &FusionModel<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.d_max() as f32).to_le_bytes());
    out.extend_from_slice(&(model.feature_channels() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<FusionModel<f32>> {
    let mut r = Reader::new(bytes, path);
    r.magic(CHECKPOINT_MAGIC)?;
    if bytes.len() < 20 {
        return Err(malformed(path, "truncated header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(malformed(path, format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader::new(body, path);
    r.pos = 4;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(malformed(path, format!("unsupported version {version}")));
    }
    let d_max = r.f32()? as f64;
    let channels = r.u32()? as usize;
    let mut entries = Vec::new();
    while r.remaining() > 0 {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| malformed(path, "parameter name is not UTF-8"))?
            .to_owned();
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let count = shape.iter().product();
        let data = r.f32s(count)?;
        entries.push((name, Tensor::new(&shape, data)?));
    }
    let extractor = ExtractorConfig {
        feature_channels: channels,
        ..ExtractorConfig::default()
    };
    let evaluator = EvaluatorConfig {
        feature_channels: channels,
        d_max,
        ..EvaluatorConfig::default()
    };
    let mut model = FusionModel::with_configs(extractor, evaluator, 0);
    ModelParams::new(entries)?
        .apply_to(&mut model)
        .map_err(|e| malformed(path, e.to_string()))?;
    model.set_training(false);
    Ok(model)
}

pub fn read_checkpoint(path: &Path) -> Result<FusionModel<f32>> {
    decode_checkpoint(&read_bytes(path)?, path)
}

pub fn write_checkpoint(path: &Path, model: &FusionModel<f32>) -> Result<()> {
    write_bytes(path, &encode_checkpoint(model))
}

/// Parses `key = value` lines; `#` starts a comment. Unset keys keep their
/// defaults, unknown keys and invalid values are rejected.
pub fn parse_run_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen = std::collections::BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        let content = line.split('#').next().unwrap_or_default().trim();
        if content.is_empty() {
            continue;
        }
        let line_no = n + 1;
        let (key, value) = content
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`, got {content:?}")))?;
        if !seen.insert(key.to_owned()) {
            return Err(Error::Config(format!("line {line_no}: duplicate key `{key}`")));
        }
        let bad = |what: &str| Error::Config(format!("line {line_no}: `{key}` needs {what}, got {value:?}"));
        let float = || value.parse::<f64>().map_err(|_| bad("a number"));
        let uint = || value.parse::<u64>().map_err(|_| bad("a non-negative integer"));
        let boolean = || value.parse::<bool>().map_err(|_| bad("true or false"));
        match key {
            "t_abs" => cfg.thresholds.t_abs = float()?,
            "t_rel" => cfg.thresholds.t_rel = float()?,
            "v" => cfg.expansion_rows = uint()? as usize,
            "tau" => cfg.tau = float()?,
            "lr" => cfg.lr = float()?,
            "epochs" => cfg.epochs = uint()? as usize,
            "seed" => cfg.seed = uint()?,
            "d_max" => cfg.d_max = float()?,
            "invert_class_weights" => cfg.invert_class_weights = boolean()?,
            "negatives_include_uncovered" => {
                cfg.uncovered = if boolean()? {
                    UncoveredPolicy::Negative
                } else {
                    UncoveredPolicy::Exclude
                }
            }
            "deterministic" => cfg.deterministic = boolean()?,
            other => return Err(Error::Config(format!("line {line_no}: unknown key `{other}`"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_run_config(path: &Path) -> Result<TrainConfig> {
    parse_run_config(&read_text(path)?)
}

/// Serializes every key, so `parse_run_config(format_run_config(c)) == c`.
pub fn format_run_config(cfg: &TrainConfig) -> String {
    let MatchThresholds { t_abs, t_rel } = cfg.thresholds;
    format!(
        "t_abs = {t_abs}\nt_rel = {t_rel}\nv = {}\ntau = {}\nlr = {}\nepochs = {}\nseed = {}\nd_max = {}\n\
         invert_class_weights = {}\nnegatives_include_uncovered = {}\ndeterministic = {}\n",
        cfg.expansion_rows,
        cfg.tau,
        cfg.lr,
        cfg.epochs,
        cfg.seed,
        cfg.d_max,
        cfg.invert_class_weights,
        cfg.uncovered == UncoveredPolicy::Negative,
        cfg.deterministic
    )
}
