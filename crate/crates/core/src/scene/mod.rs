//! Parametric urban scene: axis-aligned building boxes between a grid of
//! straight roads, a roadside base station, a geometric path tracer and a
//! depth-camera rasterizer.

pub mod dataset;
mod geometry;
mod render;
mod trace;

pub use dataset::{
    generate_dataset, load_dataset, save_dataset, split_dataset, split_counts, sweep_trajectories, Dataset,
    DatasetManifest, RenderConfig, Sample, Split, Trajectory, FORMAT_VERSION, MANIFEST_FILE, SAMPLES_FILE,
};
pub use geometry::{segment_blocked, Aabb, Vec3};
pub use render::{render_depth_views, DepthView, CAMERA_HEADINGS};
pub use trace::{trace_paths, PathKind, TracedPath};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Height of the vehicle antenna and cameras above ground, in meters.
pub const VEHICLE_HEIGHT: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Extent along x (`L_s`), meters.
    pub length: f64,
    /// Extent along y (`W_s`), meters.
    pub width: f64,
    pub n_buildings: usize,
    pub n_roads: usize,
    pub road_width: f64,
    /// Clearance between a road edge (or the scene border) and any building.
    pub setback: f64,
    pub min_height: f64,
    pub max_height: f64,
    pub bs_height: f64,
    /// Explicit base-station position; by default it sits on the sidewalk of
    /// the horizontal road closest to the scene centre.
    pub bs_position: Option<[f64; 3]>,
    /// Amplitude factor per reflection.
    pub reflection_loss: f64,
    /// Adds the specular ground bounce to the traced paths.
    pub ground_reflection: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            length: 200.0,
            width: 200.0,
            n_buildings: 4,
            n_roads: 8,
            road_width: 10.0,
            setback: 2.0,
            min_height: 10.0,
            max_height: 40.0,
            bs_height: 6.0,
            bs_position: None,
            reflection_loss: 0.5,
            ground_reflection: false,
        }
    }
}

impl SceneConfig {
    /// No buildings at all: every pose has line of sight.
    pub fn empty() -> Self {
        SceneConfig {
            n_buildings: 0,
            ..Self::default()
        }
    }

    /// Dense, tall blocks so that most off-axis roads lose line of sight.
    pub fn blockage_heavy() -> Self {
        SceneConfig {
            n_buildings: 20,
            min_height: 20.0,
            max_height: 45.0,
            ..Self::default()
        }
    }
}

/// Straight road centreline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub start: [f64; 2],
    pub end: [f64; 2],
}

impl Road {
    pub fn length(&self) -> f64 {
        ((self.end[0] - self.start[0]).powi(2) + (self.end[1] - self.start[1]).powi(2)).sqrt()
    }

    pub fn heading(&self) -> f64 {
        (self.end[1] - self.start[1]).atan2(self.end[0] - self.start[0])
    }

    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let f = s / self.length();
        [
            self.start[0] + f * (self.end[0] - self.start[0]),
            self.start[1] + f * (self.end[1] - self.start[1]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub length: f64,
    pub width: f64,
    pub buildings: Vec<Aabb>,
    pub roads: Vec<Road>,
    pub bs_position: Vec3,
    pub reflection_loss: f64,
    pub ground_reflection: bool,
    /// Seeds the per-path phase jitter.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehiclePose {
    pub position: Vec3,
    /// Radians, counter-clockwise from +x.
    pub heading: f64,
}

impl VehiclePose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        VehiclePose {
            position: Vec3::new(x, y, VEHICLE_HEIGHT),
            heading,
        }
    }
}

impl Scene {
    pub fn open(length: f64, width: f64, bs_position: Vec3) -> Self {
        Scene {
            length,
            width,
            buildings: Vec::new(),
            roads: Vec::new(),
            bs_position,
            reflection_loss: 0.5,
            ground_reflection: false,
            seed: 0,
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0.0..=self.length).contains(&p.x) && (0.0..=self.width).contains(&p.y)
    }

    pub fn line_of_sight(&self, a: Vec3, b: Vec3) -> bool {
        !segment_blocked(&self.buildings, a, b)
    }

    /// Shifts every geometric element by `offset`.
    pub fn translated(&self, offset: Vec3) -> Scene {
        Scene {
            buildings: self.buildings.iter().map(|b| b.translated(offset)).collect(),
            roads: self
                .roads
                .iter()
                .map(|r| Road {
                    start: [r.start[0] + offset.x, r.start[1] + offset.y],
                    end: [r.end[0] + offset.x, r.end[1] + offset.y],
                })
                .collect(),
            bs_position: self.bs_position + offset,
            ..self.clone()
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scene serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Road centre coordinates evenly spaced across `extent`.
fn road_lines(count: usize, extent: f64) -> Vec<f64> {
    (0..count)
        .map(|i| extent * (i + 1) as f64 / (count + 1) as f64)
        .collect()
}

/// Usable intervals between roads (and the border) along one axis.
fn cell_intervals(lines: &[f64], extent: f64, cfg: &SceneConfig) -> Vec<(f64, f64)> {
    let half = cfg.road_width / 2.0 + cfg.setback;
    let mut bounds = vec![(0.0, cfg.setback)];
    bounds.extend(lines.iter().map(|&c| (c, half)));
    bounds.push((extent, cfg.setback));
    bounds
        .windows(2)
        .map(|w| (w[0].0 + w[0].1, w[1].0 - w[1].1))
        .filter(|(lo, hi)| hi - lo >= 4.0)
        .collect()
}

/// Deterministic scene for `seed`: `ceil(n_roads/2)` horizontal and
/// `floor(n_roads/2)` vertical roads, buildings in randomly chosen blocks
/// between them.
pub fn build_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    if !(cfg.length > 0.0 && cfg.width > 0.0 && cfg.road_width > 0.0 && cfg.setback >= 0.0) {
        return Err(Error::Config("scene dimensions must be positive".into()));
    }
    if !(cfg.min_height > 0.0 && cfg.max_height >= cfg.min_height) {
        return Err(Error::Config("building heights must satisfy 0 < min ≤ max".into()));
    }
    if !(cfg.bs_height > 0.0) {
        return Err(Error::Config("base station must be above ground".into()));
    }
    if !(0.0..=1.0).contains(&cfg.reflection_loss) {
        return Err(Error::Config("reflection loss must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_hor = cfg.n_roads.div_ceil(2);
    let n_ver = cfg.n_roads / 2;
    let ys = road_lines(n_hor, cfg.width);
    let xs = road_lines(n_ver, cfg.length);
    let mut roads: Vec<Road> = ys
        .iter()
        .map(|&y| Road {
            start: [0.0, y],
            end: [cfg.length, y],
        })
        .collect();
    roads.extend(xs.iter().map(|&x| Road {
        start: [x, 0.0],
        end: [x, cfg.width],
    }));

    let cx = cell_intervals(&xs, cfg.length, cfg);
    let cy = cell_intervals(&ys, cfg.width, cfg);
    let mut cells: Vec<(usize, usize)> = (0..cx.len())
        .flat_map(|i| (0..cy.len()).map(move |j| (i, j)))
        .collect();
    if cfg.n_buildings > cells.len() {
        return Err(Error::Generation(format!(
            "{} buildings requested but only {} blocks fit between the roads",
            cfg.n_buildings,
            cells.len()
        )));
    }
    cells.shuffle(&mut rng);
    let mut buildings: Vec<Aabb> = cells[..cfg.n_buildings]
        .iter()
        .map(|&(i, j)| {
            let ((x0, x1), (y0, y1)) = (cx[i], cy[j]);
            let inset = |rng: &mut ChaCha8Rng, span: f64| rng.random_range(0.0..0.15) * span;
            let (sx, sy) = (x1 - x0, y1 - y0);
            let height = rng.random_range(cfg.min_height..=cfg.max_height);
            Aabb::new(
                Vec3::new(x0 + inset(&mut rng, sx), y0 + inset(&mut rng, sy), 0.0),
                Vec3::new(x1 - inset(&mut rng, sx), y1 - inset(&mut rng, sy), height),
            )
        })
        .collect();
    buildings.sort_by(|a, b| {
        (a.min.x, a.min.y)
            .partial_cmp(&(b.min.x, b.min.y))
            .expect("finite coordinates")
    });

    let bs_position = match cfg.bs_position {
        Some([x, y, z]) => Vec3::new(x, y, z),
        None => {
            let y = ys
                .iter()
                .copied()
                .min_by(|a, b| {
                    (a - cfg.width / 2.0)
                        .abs()
                        .partial_cmp(&(b - cfg.width / 2.0).abs())
                        .expect("finite")
                })
                .unwrap_or(cfg.width / 2.0);
            let x = cfg.length / 2.0;
            Vec3::new(x, y + cfg.road_width / 2.0 + 1.0, cfg.bs_height)
        }
    };
    if !(bs_position.z > 0.0) {
        return Err(Error::Config("base station must be above ground".into()));
    }
    if buildings.iter().any(|b| b.contains(bs_position)) {
        return Err(Error::Generation("base station falls inside a building".into()));
    }
    Ok(Scene {
        length: cfg.length,
        width: cfg.width,
        buildings,
        roads,
        bs_position,
        reflection_loss: cfg.reflection_loss,
        ground_reflection: cfg.ground_reflection,
        seed,
    })
}
