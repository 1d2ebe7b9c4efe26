use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn axis(self, i: usize) -> f64 {
        [self.x, self.y, self.z][i]
    }

    pub fn with_axis(mut self, i: usize, v: f64) -> Vec3 {
        match i {
            0 => self.x = v,
            1 => self.y = v,
            _ => self.z = v,
        }
        self
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Axis-aligned box standing on the ground plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p.axis(i) > self.min.axis(i) && p.axis(i) < self.max.axis(i))
    }

    pub fn translated(&self, o: Vec3) -> Aabb {
        Aabb::new(self.min + o, self.max + o)
    }

    /// Parameter interval `[t_enter, t_exit]` where `origin + t·dir` is inside
    /// the box (slab method), or `None` on a miss. A ray running within a
    /// face plane counts as a miss.
    pub fn ray_interval(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let (o, d) = (origin.axis(i), dir.axis(i));
            let (lo, hi) = (self.min.axis(i), self.max.axis(i));
            if d == 0.0 {
                if o <= lo || o >= hi {
                    return None;
                }
                continue;
            }
            let (a, b) = ((lo - o) / d, (hi - o) / d);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

const SEGMENT_EPS: f64 = 1e-9;

/// True when the open segment `a → b` passes through the interior of any box.
/// Endpoints are ordered canonically first, so the answer is exactly
/// symmetric in `a` and `b`.
pub fn segment_blocked(boxes: &[Aabb], a: Vec3, b: Vec3) -> bool {
    let (a, b) = if (a.x, a.y, a.z) <= (b.x, b.y, b.z) { (a, b) } else { (b, a) };
    let d = b - a;
    boxes.iter().any(|bx| match bx.ray_interval(a, d) {
        Some((t0, t1)) => {
            let (lo, hi) = (t0.max(SEGMENT_EPS), t1.min(1.0 - SEGMENT_EPS));
            hi - lo > SEGMENT_EPS
        }
        None => false,
    })
}
