use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_depth_views, DepthView, CAMERA_HEADINGS};
use super::trace::trace_paths;
use super::{Scene, SceneConfig, VehiclePose};
use crate::channel::{
    channel_response, dft_codebook, optimal_beam, ArrayGeometry, Codebook, PathComponent,
    SubcarrierGrid,
};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.bin";

/// A vehicle driving along one road at constant speed, wrapping at the end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub road: usize,
    /// m/s.
    pub speed: f64,
    /// Starting arc length along the road, meters.
    #[serde(default)]
    pub start: f64,
    /// Seconds of driving to sample.
    pub duration: f64,
    /// Drive from the road's end toward its start.
    #[serde(default)]
    pub reverse: bool,
    /// Lateral offset to the right of the driving direction, meters.
    #[serde(default)]
    pub lane_offset: f64,
}

impl Trajectory {
    pub fn n_samples(&self, sample_interval: f64) -> usize {
        (self.duration / sample_interval + 1e-9).floor() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub max_range: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: 32,
            height: 32,
            fov_deg: 90.0,
            max_range: 100.0,
        }
    }
}

impl RenderConfig {
    pub fn pixels_per_view(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Split> {
        Split::ALL.get(tag as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pose: VehiclePose,
    pub views: Vec<DepthView>,
    pub label: usize,
    pub paths: Vec<PathComponent>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// Generator settings, when the scene was built from a config.
    pub scene_config: Option<SceneConfig>,
    pub scene: Scene,
    pub scene_hash: String,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
    pub sample_interval: f64,
    pub grid: SubcarrierGrid,
    pub array: ArrayGeometry,
    pub render: RenderConfig,
    pub n_views: usize,
    pub n_beams: usize,
    pub codebook_hash: String,
    pub n_samples: usize,
    pub ratios: Option<[f64; 3]>,
    pub split_seed: Option<u64>,
    /// Train, val, test.
    pub counts: [usize; 3],
    pub los_fraction: f64,
    /// Per-view depth statistics over the training split.
    pub image_mean: Vec<f64>,
    pub image_std: Vec<f64>,
}

impl DatasetManifest {
    fn record_len(&self) -> usize {
        4 * 8 + self.n_views * self.render.pixels_per_view() * 4 + 2 + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    /// Recomputes every label from its stored paths with a fresh exhaustive
    /// sweep and fails on the first disagreement.
    pub fn audit_labels(&self, cb: &Codebook) -> Result<()> {
        let (grid, geom) = (&self.manifest.grid, &self.manifest.array);
        for (i, s) in self.samples.iter().enumerate() {
            let h = channel_response(&s.paths, grid, geom);
            let best = optimal_beam(&h, cb)?;
            if best != s.label {
                return Err(Error::Integrity(format!(
                    "sample {i} stores label {} but its channel selects beam {best}",
                    s.label
                )));
            }
        }
        Ok(())
    }
}

/// One vehicle per road and driving direction, each sweeping its whole road
/// once, two meters right of the centreline. `n_samples` is shared out as
/// evenly as possible; vehicles left with no samples are dropped.
pub fn sweep_trajectories(scene: &Scene, n_samples: usize, sample_interval: f64) -> Result<Vec<Trajectory>> {
    let n_tr = scene.roads.len() * 2;
    if n_tr == 0 {
        return Err(Error::Generation("scene has no roads to drive on".into()));
    }
    if n_samples == 0 || !(sample_interval > 0.0) {
        return Err(Error::Config("need a positive sample count and sample interval".into()));
    }
    Ok((0..n_tr)
        .filter_map(|i| {
            let n_i = n_samples / n_tr + usize::from(i < n_samples % n_tr);
            if n_i == 0 {
                return None;
            }
            let road = i / 2;
            let reverse = i % 2 == 1;
            let len = scene.roads[road].length();
            let duration = n_i as f64 * sample_interval;
            Some(Trajectory {
                road,
                speed: len / duration,
                start: if reverse { len } else { 0.0 },
                duration,
                reverse,
                lane_offset: 2.0,
            })
        })
        .collect())
}

fn pose_at(scene: &Scene, tr: &Trajectory, t: f64, wander: f64) -> VehiclePose {
    let road = &scene.roads[tr.road];
    let len = road.length();
    let (s, heading) = if tr.reverse {
        ((tr.start - tr.speed * t).rem_euclid(len), road.heading() + std::f64::consts::PI)
    } else {
        ((tr.start + tr.speed * t).rem_euclid(len), road.heading())
    };
    let [x, y] = road.point_at(s);
    let lateral = tr.lane_offset + wander;
    let heading = heading.rem_euclid(2.0 * std::f64::consts::PI);
    let (x, y) = (x + lateral * heading.sin(), y - lateral * heading.cos());
    VehiclePose::new(x.clamp(0.0, scene.length), y.clamp(0.0, scene.width), heading)
}

/// Samples each trajectory every `sample_interval` seconds, labels every pose
/// with the exhaustive best beam of its traced channel and renders its depth
/// views. `seed` drives a small lateral wander (±0.5 m) around the lane.
/// All samples start in the training split.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    scene: &Scene,
    trajectories: &[Trajectory],
    grid: &SubcarrierGrid,
    geom: &ArrayGeometry,
    cb: &Codebook,
    sample_interval: f64,
    render: &RenderConfig,
    seed: u64,
) -> Result<Dataset> {
    grid.validate()?;
    geom.validate()?;
    if cb.n_antennas() != geom.n_antennas() {
        return Err(Error::Config(format!(
            "codebook beams have {} entries for a {}-element array",
            cb.n_antennas(),
            geom.n_antennas()
        )));
    }
    if !(sample_interval > 0.0) {
        return Err(Error::Config("sample interval must be positive".into()));
    }
    if trajectories.is_empty() {
        return Err(Error::Generation("no trajectories given".into()));
    }
    for (i, tr) in trajectories.iter().enumerate() {
        if tr.road >= scene.roads.len() {
            return Err(Error::Generation(format!(
                "trajectory {i} uses road {} but the scene has {}",
                tr.road,
                scene.roads.len()
            )));
        }
        if !(tr.speed >= 0.0) || !tr.start.is_finite() || !tr.lane_offset.is_finite() {
            return Err(Error::Generation(format!("trajectory {i} has invalid kinematics")));
        }
        if tr.n_samples(sample_interval) == 0 {
            return Err(Error::Generation(format!("trajectory {i} is empty")));
        }
    }
    let wavelength = grid.wavelength();
    let fov = render.fov_deg.to_radians();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut los = 0usize;
    for tr in trajectories {
        for i in 0..tr.n_samples(sample_interval) {
            let wander = rng.random_range(-0.5..=0.5);
            let pose = pose_at(scene, tr, i as f64 * sample_interval, wander);
            let traced = trace_paths(scene, &pose, wavelength);
            if traced.iter().any(|p| p.kind == super::PathKind::LineOfSight) {
                los += 1;
            }
            let paths: Vec<PathComponent> = traced.iter().map(|p| p.component).collect();
            let label = optimal_beam(&channel_response(&paths, grid, geom), cb)?;
            let views = render_depth_views(scene, &pose, render.width, render.height, fov, render.max_range)?;
            samples.push(Sample {
                pose,
                views,
                label,
                paths,
                split: Split::Train,
            });
        }
    }
    let n = samples.len();
    let mut ds = Dataset {
        samples,
        manifest: DatasetManifest {
            format_version: FORMAT_VERSION,
            scene_config: None,
            scene: scene.clone(),
            scene_hash: scene.hash(),
            seed,
            trajectories: trajectories.to_vec(),
            sample_interval,
            grid: *grid,
            array: *geom,
            render: *render,
            n_views: CAMERA_HEADINGS.len(),
            n_beams: cb.len(),
            codebook_hash: cb.hash(),
            n_samples: n,
            ratios: None,
            split_seed: None,
            counts: [n, 0, 0],
            los_fraction: los as f64 / n as f64,
            image_mean: Vec::new(),
            image_std: Vec::new(),
        },
    };
    update_image_stats(&mut ds);
    Ok(ds)
}

/// Largest-remainder allocation of `n` items to the three splits; ties in
/// the fractional parts go to the earlier split.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = (exact[i] + 1e-9).floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - counts[a] as f64, exact[b] - counts[b] as f64);
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            return Err(Error::Generation(format!(
                "{n} samples are too few for the requested splits {ratios:?}"
            )));
        }
    }
    Ok(counts)
}

/// Random permutation followed by a contiguous train/val/test cut; samples
/// keep their original order and only receive split tags.
pub fn split_dataset(mut ds: Dataset, ratios: [f64; 3], seed: u64) -> Result<Dataset> {
    let counts = split_counts(ds.len(), ratios)?;
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (pos, &i) in perm.iter().enumerate() {
        ds.samples[i].split = if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    ds.manifest.ratios = Some(ratios);
    ds.manifest.split_seed = Some(seed);
    ds.manifest.counts = counts;
    update_image_stats(&mut ds);
    Ok(ds)
}

fn update_image_stats(ds: &mut Dataset) {
    let n_views = ds.manifest.n_views;
    let mut sum = vec![0.0f64; n_views];
    let mut sq = vec![0.0f64; n_views];
    let mut count = 0usize;
    for s in ds.samples.iter().filter(|s| s.split == Split::Train) {
        for (v, view) in s.views.iter().enumerate() {
            for &p in &view.pixels {
                sum[v] += p as f64;
                sq[v] += (p as f64) * (p as f64);
            }
        }
        count += s.views.first().map_or(0, |v| v.pixels.len());
    }
    if count == 0 {
        ds.manifest.image_mean = vec![0.0; n_views];
        ds.manifest.image_std = vec![1.0; n_views];
        return;
    }
    let c = count as f64;
    ds.manifest.image_mean = sum.iter().map(|s| s / c).collect();
    ds.manifest.image_std = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| (q / c - (s / c).powi(2)).max(0.0).sqrt())
        .collect();
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = &ds.manifest;
    let mut bytes = Vec::with_capacity(ds.len() * m.record_len());
    for s in &ds.samples {
        let p = s.pose.position;
        for v in [p.x, p.y, p.z, s.pose.heading] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for view in &s.views {
            for px in &view.pixels {
                bytes.extend_from_slice(&px.to_le_bytes());
            }
        }
        bytes.extend_from_slice(&(s.label as u16).to_le_bytes());
        bytes.push(s.split.tag());
    }
    let samples = dir.join(SAMPLES_FILE);
    fs::write(&samples, bytes).map_err(|e| Error::io(&samples, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(m)?;
    fs::write(&manifest, json).map_err(|e| Error::io(&manifest, e))
}

/// Reads a dataset directory, re-traces every pose in the stored scene and
/// re-derives its label; any inconsistency is an integrity error.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&text)
        .map_err(|e| Error::Integrity(format!("{}: {e}", mpath.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "dataset format {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.scene.hash() != manifest.scene_hash {
        return Err(Error::Integrity("scene geometry does not match its recorded hash".into()));
    }
    let cb = dft_codebook(&manifest.array);
    if cb.hash() != manifest.codebook_hash {
        return Err(Error::Integrity(
            "codebook recorded in the manifest differs from the array's DFT codebook".into(),
        ));
    }
    let spath = dir.join(SAMPLES_FILE);
    let bytes = fs::read(&spath).map_err(|e| Error::io(&spath, e))?;
    let rec = manifest.record_len();
    if bytes.len() != rec * manifest.n_samples {
        return Err(Error::Integrity(format!(
            "{} holds {} bytes; {} records of {rec} bytes expected",
            spath.display(),
            bytes.len(),
            manifest.n_samples
        )));
    }
    let (w, h) = (manifest.render.width, manifest.render.height);
    let wavelength = manifest.grid.wavelength();
    let mut samples = Vec::with_capacity(manifest.n_samples);
    let mut counts = [0usize; 3];
    for (i, chunk) in bytes.chunks_exact(rec).enumerate() {
        let f64_at = |k: usize| f64::from_le_bytes(chunk[8 * k..8 * k + 8].try_into().unwrap());
        let pose = VehiclePose {
            position: super::Vec3::new(f64_at(0), f64_at(1), f64_at(2)),
            heading: f64_at(3),
        };
        let mut off = 32;
        let mut views = Vec::with_capacity(manifest.n_views);
        for _ in 0..manifest.n_views {
            let pixels: Vec<f32> = chunk[off..off + 4 * w * h]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Integrity(format!("sample {i} has depth outside [0, 1]")));
            }
            off += 4 * w * h;
            views.push(DepthView { width: w, height: h, pixels });
        }
        let label = u16::from_le_bytes([chunk[off], chunk[off + 1]]) as usize;
        let split = Split::from_tag(chunk[off + 2])
            .ok_or_else(|| Error::Integrity(format!("sample {i} has unknown split tag {}", chunk[off + 2])))?;
        if label >= manifest.n_beams {
            return Err(Error::Integrity(format!("sample {i} label {label} out of range")));
        }
        counts[split as usize] += 1;
        let paths = trace_paths(&manifest.scene, &pose, wavelength)
            .into_iter()
            .map(|p| p.component)
            .collect();
        samples.push(Sample { pose, views, label, paths, split });
    }
    if counts != manifest.counts {
        return Err(Error::Integrity(format!(
            "split tags give {counts:?} but the manifest records {:?}",
            manifest.counts
        )));
    }
    let ds = Dataset { samples, manifest };
    ds.audit_labels(&cb)?;
    Ok(ds)
}
