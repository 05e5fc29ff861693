//! Synthetic scenes and sensors: a ground plane with boxes, ray-cast ground
//! truth depth, a shaded intensity image, analytic ego-motion flow, row-pattern
//! LiDAR and elevation-blind radar with clutter.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_point, CameraIntrinsics, CameraPoint3D, RadarReturn};
use crate::image::{FlowField, GrayImage};
use crate::nn::{seeded, Rng};
use crate::sparse_depth::SparseDepthMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxKind {
    /// Free-standing obstacle resting on the ground.
    Object,
    /// Far facade segment closing off the scene.
    Backdrop,
}

/// Axis-aligned box in the camera frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxObject {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub albedo: f64,
    pub kind: BoxKind,
}

impl BoxObject {
    pub fn min(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.center[i] - self.size[i] / 2.0)
    }

    pub fn max(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.center[i] + self.size[i] / 2.0)
    }

    /// Entry distance along `dir` (from the camera origin) and the axis of the entry face.
    fn intersect(&self, dir: [f64; 3]) -> Option<(f64, usize)> {
        let (lo, hi) = (self.min(), self.max());
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = 2;
        for i in 0..3 {
            if dir[i] == 0.0 {
                if lo[i] > 0.0 || hi[i] < 0.0 {
                    return None;
                }
                continue;
            }
            let (a, b) = (lo[i] / dir[i], hi[i] / dir[i]);
            let (t0, t1) = if a < b { (a, b) } else { (b, a) };
            if t0 > t_near {
                t_near = t0;
                axis = i;
            }
            t_far = t_far.min(t1);
        }
        (t_near <= t_far && t_near > 0.0).then_some((t_near, axis))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub camera: CameraIntrinsics,
    /// Camera height above the ground plane (the plane is `y = camera_height`).
    pub camera_height: f64,
    pub ground_albedo: f64,
    pub boxes: Vec<BoxObject>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Surface {
    Ground,
    Box(usize),
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    depth: f64,
    normal: [f64; 3],
    surface: Surface,
}

// Direction toward the light: above, slightly left, behind the camera.
const TO_LIGHT: [f64; 3] = [-0.3, -1.0, -0.5];
const AMBIENT: f64 = 0.3;
const SKY_INTENSITY: f64 = 1.0;

impl Scene {
    fn cast(&self, dir: [f64; 3]) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if dir[1] > 0.0 {
            best = Some(Hit {
                depth: self.camera_height / dir[1],
                normal: [0.0, -1.0, 0.0],
                surface: Surface::Ground,
            });
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if let Some((t, axis)) = b.intersect(dir) {
                if best.map_or(true, |h| t < h.depth) {
                    let mut normal = [0.0; 3];
                    normal[axis] = -dir[axis].signum();
                    best = Some(Hit {
                        depth: t,
                        normal,
                        surface: Surface::Box(i),
                    });
                }
            }
        }
        best
    }

    fn shade(&self, hit: &Hit) -> f64 {
        let norm = TO_LIGHT.iter().map(|v| v * v).sum::<f64>().sqrt();
        let lambert = (0..3).map(|i| hit.normal[i] * TO_LIGHT[i] / norm).sum::<f64>().max(0.0);
        let albedo = match hit.surface {
            Surface::Ground => self.ground_albedo,
            Surface::Box(i) => self.boxes[i].albedo,
        };
        albedo * (AMBIENT + (1.0 - AMBIENT) * lambert)
    }
}

/// Ground-truth depth (0 where no surface is hit), image and flow of one view.
#[derive(Clone, Debug)]
pub struct Rendering {
    pub depth: SparseDepthMap,
    pub image: GrayImage,
    pub flow: FlowField,
}

/// Ray casts every pixel center. `ego_translation` is the camera displacement
/// to the next frame; flow is the pixel motion of each static surface point.
pub fn render_scene(scene: &Scene, ego_translation: [f64; 3]) -> Result<Rendering> {
    let cam = &scene.camera;
    let (w, h) = (cam.width, cam.height);
    let mut depth = vec![0.0f32; w * h];
    let mut intensity = vec![SKY_INTENSITY; w * h];
    let mut dx = vec![0.0f32; w * h];
    let mut dy = vec![0.0f32; w * h];
    let mut any_hit = false;
    for v in 0..h {
        for u in 0..w {
            let dir = cam.ray(u as f64, v as f64);
            let Some(hit) = scene.cast(dir) else { continue };
            any_hit = true;
            let i = v * w + u;
            depth[i] = hit.depth as f32;
            intensity[i] = scene.shade(&hit);
            // displacement of the projection of a static point when the camera moves by t:
            // u' - u = fx (dir_x t_z - t_x) / (z - t_z)
            let [tx, ty, tz] = ego_translation;
            let ahead = hit.depth - tz;
            if ahead > 0.0 {
                dx[i] = (cam.fx * (dir[0] * tz - tx) / ahead) as f32;
                dy[i] = (cam.fy * (dir[1] * tz - ty) / ahead) as f32;
            }
        }
    }
    if !any_hit {
        return Err(Error::InvalidArgument("no geometry inside the view frustum".into()));
    }
    Ok(Rendering {
        depth: SparseDepthMap::from_values(w, h, depth)?,
        image: GrayImage::from_intensities(w, h, &intensity)?,
        flow: FlowField::new(w, h, dx, dy)?,
    })
}

/// Row-subsampled LiDAR pattern.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPattern {
    /// Keep every `row_step`-th image row.
    pub row_step: usize,
    /// Independent per-pixel drop probability on kept rows.
    pub dropout: f64,
    /// Returns beyond this depth are lost.
    pub max_range: f64,
}

impl Default for LidarPattern {
    fn default() -> Self {
        Self {
            row_step: 4,
            dropout: 0.2,
            max_range: 80.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorNoise {
    /// LiDAR depth noise (meters).
    pub lidar_sigma: f64,
    /// Radar range noise (meters).
    pub radar_sigma: f64,
    /// Radar vertical field: surfaces further than this from the horizontal
    /// plane (degrees) produce no return.
    pub elevation_bound_deg: f64,
    /// Mean number of spurious radar returns per frame (Poisson).
    pub clutter_rate: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        Self {
            lidar_sigma: 0.02,
            radar_sigma: 0.1,
            elevation_bound_deg: 20.0,
            clutter_rate: 2.0,
        }
    }
}

impl SensorNoise {
    pub fn noiseless() -> Self {
        Self {
            lidar_sigma: 0.0,
            radar_sigma: 0.0,
            clutter_rate: 0.0,
            ..Self::default()
        }
    }

    /// Named presets: `default`, `noiseless` and `harsh` (5x range noise, 3 clutter returns).
    pub fn from_profile(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "noiseless" => Ok(Self::noiseless()),
            "harsh" => Ok(Self {
                lidar_sigma: 0.05,
                radar_sigma: 0.5,
                clutter_rate: 3.0,
                ..Self::default()
            }),
            other => Err(Error::Config(format!(
                "unknown noise profile `{other}` (expected default, noiseless or harsh)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.lidar_sigma, self.radar_sigma, self.elevation_bound_deg, self.clutter_rate]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !ok {
            return Err(Error::InvalidArgument(format!("noise parameters must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Keeps every `row_step`-th row of the ground truth, drops pixels at random
/// and perturbs the survivors with Gaussian noise.
pub fn sample_lidar(gt: &SparseDepthMap, pattern: &LidarPattern, noise: &SensorNoise, rng: &mut Rng) -> SparseDepthMap {
    let mut lm = SparseDepthMap::empty(gt.width(), gt.height());
    let step = pattern.row_step.max(1);
    let normal = Normal::new(0.0, noise.lidar_sigma.max(0.0)).expect("finite sigma");
    for (p, d) in gt.measured() {
        if p.y % step != 0 || (d as f64) > pattern.max_range {
            continue;
        }
        if pattern.dropout > 0.0 && rng.gen::<f64>() < pattern.dropout {
            continue;
        }
        let noisy = if noise.lidar_sigma > 0.0 {
            d as f64 + normal.sample(rng)
        } else {
            d as f64
        };
        lm.set(p, noisy.max(1e-3) as f32);
    }
    lm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ReturnSource {
    /// Reflection off `scene.boxes[index]`.
    Box(usize),
    Clutter,
}

/// What the radar does not report: the true reflection point of each return.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnTruth {
    pub point: CameraPoint3D,
    pub source: ReturnSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarSample {
    pub returns: Vec<RadarReturn>,
    pub truth: Vec<ReturnTruth>,
}

/// One return per box whose front face is visible, reflecting at the visible
/// face point nearest to the radar (kept a quarter face width from the edges)
/// with noisy range; plus Poisson clutter at uniform random depth and column.
pub fn sample_radar(scene: &Scene, noise: &SensorNoise, d_max: f64, rng: &mut Rng) -> Result<RadarSample> {
    noise.validate()?;
    let cam = &scene.camera;
    let range_noise = Normal::new(0.0, noise.radar_sigma).expect("finite sigma");
    let mut returns = Vec::new();
    let mut truth = Vec::new();
    let bound = noise.elevation_bound_deg.to_radians().tan();
    for (i, b) in scene.boxes.iter().enumerate() {
        let (lo, hi) = (b.min(), b.max());
        if lo[2] <= 0.0 {
            continue;
        }
        let inset = 0.25 * b.size[0];
        let (x_lo, x_hi) = (lo[0] + inset, hi[0] - inset);
        let y = 0.0f64.clamp(lo[1], hi[1]);
        let z = lo[2];
        if y.abs() > bound * z {
            continue;
        }
        // the radar sees the visible point of the front face nearest to it;
        // candidates lie on pixel-center rays so the point matches the rendering
        let u_lo = (cam.fx * x_lo / z + cam.cx).ceil().max(0.0) as i64;
        let u_hi = (cam.fx * x_hi / z + cam.cx).floor().min(cam.width as f64 - 1.0) as i64;
        let mut candidates: Vec<f64> = (u_lo..=u_hi).map(|u| (u as f64 - cam.cx) * z / cam.fx).collect();
        candidates.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
        let mut reflection = None;
        for x in candidates {
            let point = CameraPoint3D::new(x, y, z);
            if project_point(&point, cam)?.is_none() {
                continue;
            }
            let visible = scene
                .cast([x / z, y / z, 1.0])
                .is_some_and(|h| h.surface == Surface::Box(i) && (h.depth - z).abs() < 1e-6);
            if visible {
                reflection = Some(point);
                break;
            }
        }
        let Some(point) = reflection else { continue };
        let x = point.x;
        let noisy = if noise.radar_sigma > 0.0 {
            z + range_noise.sample(rng)
        } else {
            z
        };
        returns.push(RadarReturn::new(x, noisy.max(0.1)));
        truth.push(ReturnTruth {
            point,
            source: ReturnSource::Box(i),
        });
    }
    if noise.clutter_rate > 0.0 {
        let count = Poisson::new(noise.clutter_rate)
            .expect("positive rate")
            .sample(rng) as usize;
        for _ in 0..count {
            let z = rng.gen_range(2.0..d_max);
            let u = rng.gen_range(0.0..cam.width as f64 - 0.5);
            let x = (u - cam.cx) * z / cam.fx;
            returns.push(RadarReturn::new(x, z));
            truth.push(ReturnTruth {
                point: CameraPoint3D::new(x, 0.0, z),
                source: ReturnSource::Clutter,
            });
        }
    }
    Ok(RadarSample { returns, truth })
}

/// Parameters of the random scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecipe {
    pub camera: CameraIntrinsics,
    pub camera_height: f64,
    pub ground_albedo: f64,
    pub box_count: (usize, usize),
    /// Range of front-face depths of objects.
    pub depth_range: (f64, f64),
    pub width_range: (f64, f64),
    pub height_range: (f64, f64),
    pub length_range: (f64, f64),
    /// Objects draw albedos from this band in steps of `albedo_step`.
    pub object_albedo: (f64, f64),
    pub albedo_step: f64,
    pub backdrop: Option<BackdropRecipe>,
}

/// A row of tall facade segments behind all objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackdropRecipe {
    pub depth_range: (f64, f64),
    pub segment_width: f64,
    pub height: f64,
    pub albedo: (f64, f64),
}

impl Default for SceneRecipe {
    fn default() -> Self {
        Self {
            camera: CameraIntrinsics {
                fx: 164.8,
                fy: 164.8,
                cx: 200.0,
                // horizon at three quarters of the height: a quarter of the frame is ground
                cy: 144.0,
                width: 400,
                height: 192,
            },
            camera_height: 1.5,
            ground_albedo: 0.35,
            box_count: (4, 10),
            depth_range: (5.0, 70.0),
            width_range: (1.5, 3.5),
            height_range: (1.6, 4.5),
            length_range: (1.0, 4.0),
            object_albedo: (0.1, 0.6),
            albedo_step: 0.05,
            backdrop: Some(BackdropRecipe {
                depth_range: (72.0, 78.0),
                segment_width: 40.0,
                height: 80.0,
                albedo: (0.65, 1.0),
            }),
        }
    }
}

impl SceneRecipe {
    /// Same recipe with a smaller image; focal lengths scale with the width.
    pub fn with_size(mut self, width: usize, height: usize) -> Self {
        let s = width as f64 / self.camera.width as f64;
        self.camera = CameraIntrinsics {
            fx: self.camera.fx * s,
            fy: self.camera.fy * s,
            cx: self.camera.cx * width as f64 / self.camera.width as f64,
            cy: self.camera.cy * height as f64 / self.camera.height as f64,
            width,
            height,
        };
        self
    }
}

fn albedo_slots(band: (f64, f64), step: f64) -> Vec<f64> {
    let n = ((band.1 - band.0) / step + 1e-9).floor() as usize + 1;
    (0..n).map(|k| band.0 + k as f64 * step).collect()
}

/// Draws a random scene. Objects never overlap on the ground and all albedos
/// in the scene differ pairwise by at least `albedo_step`.
pub fn generate_scene(seed: u64, recipe: &SceneRecipe) -> Result<Scene> {
    recipe.camera.validate()?;
    let mut rng = seeded(seed);
    let cam = recipe.camera;
    let mut slots = albedo_slots(recipe.object_albedo, recipe.albedo_step);
    slots.shuffle(&mut rng);
    let count = rng
        .gen_range(recipe.box_count.0..=recipe.box_count.1)
        .min(slots.len());
    let mut boxes: Vec<BoxObject> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < count && attempts < 1000 {
        attempts += 1;
        let front = rng.gen_range(recipe.depth_range.0..=recipe.depth_range.1);
        let size = [
            rng.gen_range(recipe.width_range.0..=recipe.width_range.1),
            rng.gen_range(recipe.height_range.0..=recipe.height_range.1),
            rng.gen_range(recipe.length_range.0..=recipe.length_range.1),
        ];
        let u = rng.gen_range(0.05 * cam.width as f64..0.95 * cam.width as f64);
        let cx = (u - cam.cx) * front / cam.fx;
        let candidate = BoxObject {
            center: [cx, recipe.camera_height - size[1] / 2.0, front + size[2] / 2.0],
            size,
            albedo: slots[boxes.len()],
            kind: BoxKind::Object,
        };
        let overlaps = boxes.iter().any(|b| {
            let (a0, a1, b0, b1) = (candidate.min(), candidate.max(), b.min(), b.max());
            a0[0] < b1[0] + 0.5 && b0[0] < a1[0] + 0.5 && a0[2] < b1[2] + 0.5 && b0[2] < a1[2] + 0.5
        });
        if !overlaps {
            boxes.push(candidate);
        }
    }
    if let Some(bd) = &recipe.backdrop {
        let mut slots = albedo_slots(bd.albedo, recipe.albedo_step);
        slots.shuffle(&mut rng);
        // cover the horizontal field of view at the farthest backdrop depth
        let half = bd.depth_range.1 * cam.cx.max(cam.width as f64 - cam.cx) / cam.fx + bd.segment_width;
        let mut x = -half;
        let mut k = 0;
        while x < half {
            let depth = rng.gen_range(bd.depth_range.0..=bd.depth_range.1);
            boxes.push(BoxObject {
                // neighbours overlap so rays grazing a depth step still hit a facade
                center: [x + bd.segment_width / 2.0, recipe.camera_height - bd.height / 2.0, depth + 1.0],
                size: [bd.segment_width * 1.5, bd.height, 2.0],
                albedo: *slots.get(k).ok_or_else(|| {
                    Error::InvalidArgument("backdrop has more segments than distinct albedos".into())
                })?,
                kind: BoxKind::Backdrop,
            });
            x += bd.segment_width;
            k += 1;
        }
    }
    Ok(Scene {
        camera: cam,
        camera_height: recipe.camera_height,
        ground_albedo: recipe.ground_albedo,
        boxes,
        seed,
    })
}

/// Everything one synthetic frame provides.
#[derive(Clone, Debug)]
pub struct SyntheticFrame {
    pub scene: Scene,
    pub rendering: Rendering,
    pub lidar: SparseDepthMap,
    pub radar: RadarSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSuite {
    pub noise: SensorNoise,
    pub lidar: LidarPattern,
    pub ego_translation: [f64; 3],
    pub d_max: f64,
}

impl Default for SensorSuite {
    fn default() -> Self {
        Self {
            noise: SensorNoise::default(),
            lidar: LidarPattern::default(),
            ego_translation: [0.0, 0.0, 1.0],
            d_max: 80.0,
        }
    }
}

/// Generates, renders and senses one scene. Sensor randomness is seeded from
/// `seed` independently of the scene layout.
pub fn synthesize(seed: u64, recipe: &SceneRecipe, suite: &SensorSuite) -> Result<SyntheticFrame> {
    let scene = generate_scene(seed, recipe)?;
    let rendering = render_scene(&scene, suite.ego_translation)?;
    let mut rng = seeded(seed ^ 0x9E37_79B9_7F4A_7C15);
    let lidar = sample_lidar(&rendering.depth, &suite.lidar, &suite.noise, &mut rng);
    let radar = sample_radar(&scene, &suite.noise, suite.d_max, &mut rng)?;
    Ok(SyntheticFrame {
        scene,
        rendering,
        lidar,
        radar,
    })
}
