//! Pinhole projection and the vertical-uncertainty geometry of radar returns.
//!
//! Camera frame: `x` right, `y` down, `z` forward. Pixel `(u, v)` has its
//! center on the ray `((u - cx) / fx, (v - cy) / fy, 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("empty image".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Ray direction (unnormalized, `z = 1`) through the center of pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    /// 3-D point at depth `z` seen through pixel `(u, v)`.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> CameraPoint3D {
        let [rx, ry, _] = self.ray(u, v);
        CameraPoint3D {
            x: rx * z,
            y: ry * z,
            z,
        }
    }

    fn contains(&self, u: i64, v: i64) -> bool {
        u >= 0 && v >= 0 && (u as usize) < self.width && (v as usize) < self.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPoint3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CameraPoint3D {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }
}

/// A radar measurement: lateral offset and forward range are known, elevation is not.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarReturn {
    pub x: f64,
    pub z: f64,
}

impl RadarReturn {
    pub fn new(x: f64, z: f64) -> Self {
        Self { x, z }
    }

    pub fn depth(&self) -> f64 {
        self.z
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pixel {
    pub x: usize,
    pub y: usize,
}

impl Pixel {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

/// Nearest integer, ties toward +infinity. The single rounding rule shared by
/// every pixelization in the crate.
pub fn round_pixel(coord: f64) -> i64 {
    (coord + 0.5).floor() as i64
}

/// Projects a camera-frame point to its pixel; `Ok(None)` when it falls outside the image.
pub fn project_point(p: &CameraPoint3D, cam: &CameraIntrinsics) -> Result<Option<Pixel>> {
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera { z: p.z });
    }
    let u = round_pixel(cam.fx * p.x / p.z + cam.cx);
    let v = round_pixel(cam.fy * p.y / p.z + cam.cy);
    Ok(cam.contains(u, v).then(|| Pixel::new(u as usize, v as usize)))
}

/// Image row of the horizontal plane through the optical center, shifted by
/// `row_offset` for radars mounted off the camera height.
pub fn horizon_row(cam: &CameraIntrinsics, row_offset: i64) -> i64 {
    round_pixel(cam.cy) + row_offset
}

/// Radar-map pixel of a return under the assumption that it was measured
/// parallel to the ground: its column from `x / z`, its row on the horizon.
pub fn project_radar_horizontal(r: &RadarReturn, cam: &CameraIntrinsics) -> Result<Option<Pixel>> {
    project_radar_with_offset(r, cam, 0)
}

pub fn project_radar_with_offset(
    r: &RadarReturn,
    cam: &CameraIntrinsics,
    row_offset: i64,
) -> Result<Option<Pixel>> {
    if !(r.z > 0.0) {
        return Err(Error::BehindCamera { z: r.z });
    }
    let u = round_pixel(cam.fx * r.x / r.z + cam.cx);
    let v = horizon_row(cam, row_offset);
    Ok(cam.contains(u, v).then(|| Pixel::new(u as usize, v as usize)))
}

/// Number of image rows spanned upward by a vertical uncertainty of `theta_deg`
/// above the horizontal: `min(height, ceil(fy * tan(theta)))`.
pub fn compute_expansion_pixels(cam: &CameraIntrinsics, theta_deg: f64) -> Result<usize> {
    if !(theta_deg > 0.0 && theta_deg < 90.0) {
        return Err(Error::InvalidArgument(format!(
            "vertical uncertainty must be in (0, 90) degrees, got {theta_deg}"
        )));
    }
    let rows = (cam.fy * theta_deg.to_radians().tan()).ceil();
    Ok((rows as usize).min(cam.height))
}
