use serde::{Deserialize, Serialize};

use super::geometry::Vec3;
use super::{Scene, VehiclePose};
use crate::error::{Error, Result};

/// Camera headings relative to the vehicle, in degrees: front, front-left,
/// front-right, back, back-left, back-right.
pub const CAMERA_HEADINGS: [f64; 6] = [0.0, 60.0, -60.0, 180.0, 120.0, -120.0];

/// Normalized depth image, row-major from the top-left pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthView {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl DepthView {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

/// Pinhole depth cameras at the vehicle antenna. Each pixel holds the
/// distance along the camera axis to the first building surface divided by
/// `max_range`, clamped to 1 (sky, ground and anything beyond range).
pub fn render_depth_views(
    scene: &Scene,
    pose: &VehiclePose,
    width: usize,
    height: usize,
    fov: f64,
    max_range: f64,
) -> Result<Vec<DepthView>> {
    if width == 0 || height == 0 {
        return Err(Error::Config("depth views need a positive resolution".into()));
    }
    if !(fov > 0.0 && fov < std::f64::consts::PI) || !(max_range > 0.0) {
        return Err(Error::Config("camera fov must lie in (0, π) and range be positive".into()));
    }
    let half = (fov / 2.0).tan();
    let aspect = height as f64 / width as f64;
    let origin = pose.position;
    Ok(CAMERA_HEADINGS
        .iter()
        .map(|rel| {
            let a = pose.heading + rel.to_radians();
            let forward = Vec3::new(a.cos(), a.sin(), 0.0);
            let right = Vec3::new(a.sin(), -a.cos(), 0.0);
            let up = Vec3::new(0.0, 0.0, 1.0);
            let mut pixels = Vec::with_capacity(width * height);
            for r in 0..height {
                let v = (1.0 - 2.0 * (r as f64 + 0.5) / height as f64) * half * aspect;
                for c in 0..width {
                    let u = (2.0 * (c as f64 + 0.5) / width as f64 - 1.0) * half;
                    // unnormalized so the hit parameter is the planar depth
                    let dir = forward + right * u + up * v;
                    let t = scene
                        .buildings
                        .iter()
                        .filter_map(|b| b.ray_interval(origin, dir))
                        .filter(|&(_, t1)| t1 > 0.0)
                        .map(|(t0, _)| t0.max(0.0))
                        .fold(f64::INFINITY, f64::min);
                    pixels.push((t / max_range).min(1.0) as f32);
                }
            }
            DepthView { width, height, pixels }
        })
        .collect())
}
