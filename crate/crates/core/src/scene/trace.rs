use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::geometry::{segment_blocked, Vec3};
use super::{Scene, VehiclePose};
use crate::channel::{departure_angles, PathComponent, SPEED_OF_LIGHT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathKind {
    LineOfSight,
    Ground,
    /// Face index: 0 = −x, 1 = +x, 2 = −y, 3 = +y.
    Facade { building: usize, face: usize },
}

impl PathKind {
    fn reflector_id(self) -> u64 {
        match self {
            PathKind::LineOfSight => 0,
            PathKind::Ground => 1,
            PathKind::Facade { building, face } => 2 + 4 * building as u64 + face as u64,
        }
    }

    pub fn bounces(self) -> i32 {
        match self {
            PathKind::LineOfSight => 0,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracedPath {
    pub kind: PathKind,
    pub length: f64,
    /// Bounce point for reflected paths.
    pub bounce: Option<Vec3>,
    pub component: PathComponent,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic per-reflector phase offset in `[0, 2π)`.
fn phase_jitter(seed: u64, id: u64) -> f64 {
    let bits = splitmix(splitmix(seed) ^ id) >> 11;
    2.0 * PI * bits as f64 / (1u64 << 53) as f64
}

fn make_path(scene: &Scene, kind: PathKind, first_leg: Vec3, length: f64, wavelength: f64, bounce: Option<Vec3>) -> TracedPath {
    let d = first_leg * (1.0 / first_leg.norm());
    // array frame: horizontal axis +x, vertical +z, broadside +y
    let (azimuth, elevation) = departure_angles(d.x, d.z, d.y);
    let loss = scene.reflection_loss.powi(kind.bounces());
    let phase = (2.0 * PI * (length % wavelength) / wavelength
        + phase_jitter(scene.seed, kind.reflector_id()))
    .rem_euclid(2.0 * PI);
    TracedPath {
        kind,
        length,
        bounce,
        component: PathComponent {
            attenuation: wavelength / (4.0 * PI * length) * loss,
            delay: length / SPEED_OF_LIGHT,
            phase,
            azimuth,
            elevation,
        },
    }
}

/// Line-of-sight, single facade reflections and (when enabled) the ground
/// bounce between the base station and the vehicle antenna, sorted by delay. Reflections use the
/// image method and require both legs to be unobstructed.
pub fn trace_paths(scene: &Scene, pose: &VehiclePose, wavelength: f64) -> Vec<TracedPath> {
    let bs = scene.bs_position;
    let ms = pose.position;
    let boxes = &scene.buildings;
    let mut out = Vec::new();

    if !segment_blocked(boxes, bs, ms) {
        out.push(make_path(scene, PathKind::LineOfSight, ms - bs, (ms - bs).norm(), wavelength, None));
    }

    if scene.ground_reflection && bs.z > 0.0 && ms.z > 0.0 {
        let image = bs.with_axis(2, -bs.z);
        let t = bs.z / (bs.z + ms.z);
        let p = image + (ms - image) * t;
        let p = p.with_axis(2, 0.0);
        if !segment_blocked(boxes, bs, p) && !segment_blocked(boxes, p, ms) {
            out.push(make_path(scene, PathKind::Ground, p - bs, (ms - image).norm(), wavelength, Some(p)));
        }
    }

    for (bi, b) in boxes.iter().enumerate() {
        for face in 0..4 {
            let axis = face / 2;
            let (plane, outward) = if face % 2 == 0 { (b.min.axis(axis), -1.0) } else { (b.max.axis(axis), 1.0) };
            let side = |q: Vec3| outward * (q.axis(axis) - plane);
            if side(bs) <= 0.0 || side(ms) <= 0.0 {
                continue;
            }
            let image = bs.with_axis(axis, 2.0 * plane - bs.axis(axis));
            let t = (plane - image.axis(axis)) / (ms.axis(axis) - image.axis(axis));
            let p = (image + (ms - image) * t).with_axis(axis, plane);
            let other = 1 - axis;
            let inside = p.axis(other) >= b.min.axis(other)
                && p.axis(other) <= b.max.axis(other)
                && p.z >= b.min.z
                && p.z <= b.max.z;
            if !inside || segment_blocked(boxes, bs, p) || segment_blocked(boxes, p, ms) {
                continue;
            }
            let kind = PathKind::Facade { building: bi, face };
            out.push(make_path(scene, kind, p - bs, (ms - image).norm(), wavelength, Some(p)));
        }
    }

    out.sort_by(|a, b| a.length.partial_cmp(&b.length).expect("finite path lengths"));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Aabb;

    const LAMBDA: f64 = SPEED_OF_LIGHT / 28e9;

    #[test]
    fn open_scene_has_los_and_optional_ground() {
        let mut scene = Scene::open(100.0, 100.0, Vec3::new(10.0, 10.0, 6.0));
        let pose = VehiclePose::new(40.0, 50.0, 0.0);
        let paths = trace_paths(&scene, &pose, LAMBDA);
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].kind.bounces(), 0);
        scene.ground_reflection = true;
        let paths = trace_paths(&scene, &pose, LAMBDA);
        assert_eq!(paths.len(), 2);
        assert_eq!(paths[0].kind, PathKind::LineOfSight);
        let d = (pose.position - scene.bs_position).norm();
        assert!((paths[0].length - d).abs() < 1e-12);
        assert!((paths[0].component.delay - d / SPEED_OF_LIGHT).abs() < 1e-20);
        assert!((paths[0].component.attenuation - LAMBDA / (4.0 * PI * d)).abs() < 1e-18);
        assert_eq!(paths[1].kind, PathKind::Ground);
        assert!(paths[1].component.delay > paths[0].component.delay);
    }

    #[test]
    fn blocked_los_is_dropped() {
        let mut scene = Scene::open(100.0, 100.0, Vec3::new(10.0, 50.0, 6.0));
        scene.buildings.push(Aabb::new(Vec3::new(40.0, 40.0, 0.0), Vec3::new(50.0, 60.0, 30.0)));
        let paths = trace_paths(&scene, &VehiclePose::new(80.0, 50.0, 0.0), LAMBDA);
        assert!(paths.is_empty());
    }
}
