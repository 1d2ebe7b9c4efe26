//! Downlink multipath OFDM channel, UPA steering vectors, the 2-D DFT beam
//! codebook and the exhaustive best-beam search that labels every sample.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{write_tensor, Tensor};

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Uniform planar array at the base station.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayGeometry {
    pub n_h: usize,
    pub n_v: usize,
    /// Element spacing in wavelengths.
    pub spacing: f64,
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        ArrayGeometry {
            n_h: 8,
            n_v: 8,
            spacing: 0.5,
        }
    }
}

impl ArrayGeometry {
    pub fn n_antennas(&self) -> usize {
        self.n_h * self.n_v
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_h == 0 || self.n_v == 0 {
            return Err(Error::Config("array needs at least one element per axis".into()));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::Config(format!("element spacing must be positive, got {}", self.spacing)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathComponent {
    pub attenuation: f64,
    /// Seconds.
    pub delay: f64,
    /// Radians in `[0, 2π)`.
    pub phase: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

/// OFDM subcarriers centred on the carrier: `f_k = f_c + (k - N_s/2)·Δf`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubcarrierGrid {
    pub n_subcarriers: usize,
    pub center_frequency: f64,
    pub spacing: f64,
}

impl Default for SubcarrierGrid {
    fn default() -> Self {
        SubcarrierGrid {
            n_subcarriers: 16,
            center_frequency: 28e9,
            spacing: 120e3,
        }
    }
}

impl SubcarrierGrid {
    pub fn validate(&self) -> Result<()> {
        if self.n_subcarriers == 0 {
            return Err(Error::Config("need at least one subcarrier".into()));
        }
        if !(self.spacing > 0.0) || !(self.center_frequency > 0.0) {
            return Err(Error::Config("subcarrier frequencies must be positive".into()));
        }
        Ok(())
    }

    pub fn frequency(&self, k: usize) -> f64 {
        self.center_frequency + (k as f64 - self.n_subcarriers as f64 / 2.0) * self.spacing
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.center_frequency
    }
}

/// Per-subcarrier channel vectors `h[k]`, each of length `N_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelResponse {
    n_antennas: usize,
    values: Vec<Complex64>,
}

impl ChannelResponse {
    pub fn zeros(n_subcarriers: usize, n_antennas: usize) -> Self {
        ChannelResponse {
            n_antennas,
            values: vec![Complex64::new(0.0, 0.0); n_subcarriers * n_antennas],
        }
    }

    /// The same vector on every subcarrier.
    pub fn flat(n_subcarriers: usize, h: &[Complex64]) -> Self {
        ChannelResponse {
            n_antennas: h.len(),
            values: (0..n_subcarriers).flat_map(|_| h.iter().copied()).collect(),
        }
    }

    pub fn n_subcarriers(&self) -> usize {
        self.values.len() / self.n_antennas
    }

    pub fn n_antennas(&self) -> usize {
        self.n_antennas
    }

    pub fn subcarrier(&self, k: usize) -> &[Complex64] {
        &self.values[k * self.n_antennas..(k + 1) * self.n_antennas]
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        ChannelResponse {
            n_antennas: self.n_antennas,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &ChannelResponse) -> Result<Self> {
        if self.values.len() != other.values.len() || self.n_antennas != other.n_antennas {
            return Err(Error::dim("channel add", "responses differ in size"));
        }
        Ok(ChannelResponse {
            n_antennas: self.n_antennas,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &ChannelResponse) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// `[N_s × N_b × 2]` tensor with interleaved real and imaginary parts.
    pub fn to_tensor(&self) -> Tensor {
        complex_tensor(&self.values, self.n_subcarriers(), self.n_antennas)
    }
}

fn complex_tensor(values: &[Complex64], rows: usize, cols: usize) -> Tensor {
    let data = values.iter().flat_map(|c| [c.re, c.im]).collect();
    Tensor::new(vec![rows, cols, 2], data).expect("consistent complex dump")
}

/// Array response toward azimuth `θ` and elevation `φ`: entry `(h, v)` is
/// `exp(j·2π·spacing·(h·cos φ + v·sin θ·sin φ)) / sqrt(N_h·N_v)`, flattened
/// h-major (`h·N_v + v`).
pub fn steering_vector(azimuth: f64, elevation: f64, geom: &ArrayGeometry) -> Vec<Complex64> {
    let norm = 1.0 / (geom.n_antennas() as f64).sqrt();
    let k = 2.0 * PI * geom.spacing;
    let (u, w) = (elevation.cos(), azimuth.sin() * elevation.sin());
    let mut out = Vec::with_capacity(geom.n_antennas());
    for h in 0..geom.n_h {
        for v in 0..geom.n_v {
            out.push(Complex64::from_polar(norm, k * (h as f64 * u + v as f64 * w)));
        }
    }
    out
}

/// Departure angles for a unit direction expressed in the array frame:
/// `d_h` along the horizontal element axis, `d_v` vertical, `d_n` along the
/// broadside normal. Chosen so that `cos φ = d_h` and `sin θ·sin φ = d_v`.
pub fn departure_angles(d_h: f64, d_v: f64, d_n: f64) -> (f64, f64) {
    let elevation = d_h.clamp(-1.0, 1.0).acos();
    let azimuth = d_v.atan2(d_n);
    (azimuth, elevation)
}

/// `h[k] = Σ_l α_l·exp(-j2π f_k τ_l + jψ_l)·a(θ_l, φ_l)`.
pub fn channel_response(
    paths: &[PathComponent],
    grid: &SubcarrierGrid,
    geom: &ArrayGeometry,
) -> ChannelResponse {
    let nb = geom.n_antennas();
    let mut out = ChannelResponse::zeros(grid.n_subcarriers, nb);
    for p in paths {
        let a = steering_vector(p.azimuth, p.elevation, geom);
        for k in 0..grid.n_subcarriers {
            let coeff = Complex64::from_polar(
                p.attenuation,
                -2.0 * PI * grid.frequency(k) * p.delay + p.phase,
            );
            let hk = &mut out.values[k * nb..(k + 1) * nb];
            hk.iter_mut().zip(&a).for_each(|(h, ai)| *h += coeff * ai);
        }
    }
    out
}

/// Unit-norm beamforming vectors, index `m = p·N_v + q`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    n_antennas: usize,
    beams: Vec<Vec<Complex64>>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    pub fn n_antennas(&self) -> usize {
        self.n_antennas
    }

    pub fn beam(&self, m: usize) -> &[Complex64] {
        &self.beams[m]
    }

    pub fn beams(&self) -> impl Iterator<Item = &[Complex64]> {
        self.beams.iter().map(|b| b.as_slice())
    }

    /// `[M × N_b × 2]` interleaved real/imaginary dump.
    pub fn to_tensor(&self) -> Tensor {
        let flat: Vec<Complex64> = self.beams.iter().flatten().copied().collect();
        complex_tensor(&flat, self.beams.len(), self.n_antennas)
    }

    /// SHA-256 of the tensor dump; ties dataset labels to the codebook that made them.
    pub fn hash(&self) -> String {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &self.to_tensor()).expect("in-memory write");
        hex::encode(Sha256::digest(&buf))
    }
}

fn dft_column(n: usize, p: usize) -> Vec<Complex64> {
    let s = 1.0 / (n as f64).sqrt();
    (0..n)
        .map(|i| Complex64::from_polar(s, -2.0 * PI * (i * p % n) as f64 / n as f64))
        .collect()
}

/// Columns of `DFT(N_h) ⊗ DFT(N_v)`, matching the UPA phase structure.
pub fn dft_codebook(geom: &ArrayGeometry) -> Codebook {
    let (nh, nv) = (geom.n_h, geom.n_v);
    let horizontal: Vec<_> = (0..nh).map(|p| dft_column(nh, p)).collect();
    let vertical: Vec<_> = (0..nv).map(|q| dft_column(nv, q)).collect();
    let mut beams = Vec::with_capacity(nh * nv);
    for fh in &horizontal {
        for fv in &vertical {
            beams.push(fh.iter().flat_map(|a| fv.iter().map(move |b| a * b)).collect());
        }
    }
    Codebook {
        n_antennas: nh * nv,
        beams,
    }
}

/// `(1/N_s)·Σ_k |h[k]ᵀ f|²` (plain transpose, no conjugate).
pub fn received_power(h: &ChannelResponse, f: &[Complex64]) -> Result<f64> {
    if f.len() != h.n_antennas {
        return Err(Error::dim(
            "received_power",
            format!("beam of {} for {} antennas", f.len(), h.n_antennas),
        ));
    }
    let ns = h.n_subcarriers();
    let total: f64 = (0..ns)
        .map(|k| {
            h.subcarrier(k)
                .iter()
                .zip(f)
                .map(|(a, b)| a * b)
                .sum::<Complex64>()
                .norm_sqr()
        })
        .sum();
    Ok(total / ns as f64)
}

/// Exhaustive sweep; the lowest index wins ties.
pub fn optimal_beam(h: &ChannelResponse, cb: &Codebook) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (m, f) in cb.beams().enumerate() {
        let p = received_power(h, f)?;
        if p > best.1 {
            best = (m, p);
        }
    }
    Ok(best.0)
}

#[derive(Clone, Debug)]
pub struct RxSignal {
    pub symbols: Vec<Complex64>,
    pub noise_variance: f64,
    pub noise: Vec<Complex64>,
    pub received: Vec<Complex64>,
}

/// `y[k] = h[k]ᵀ f·x[k] + n[k]`, `n[k] ~ CN(0, σ²)` from a seeded stream.
pub fn simulate_rx(
    h: &ChannelResponse,
    f: &[Complex64],
    symbols: &[Complex64],
    noise_variance: f64,
    seed: u64,
) -> Result<RxSignal> {
    if !(noise_variance >= 0.0) {
        return Err(Error::Config(format!("noise variance must be ≥ 0, got {noise_variance}")));
    }
    if f.len() != h.n_antennas || symbols.len() != h.n_subcarriers() {
        return Err(Error::dim("simulate_rx", "beam or symbol count does not match channel"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = (noise_variance / 2.0).sqrt();
    let mut noise = Vec::with_capacity(symbols.len());
    let mut received = Vec::with_capacity(symbols.len());
    for (k, &x) in symbols.iter().enumerate() {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        let n = Complex64::new(sd * re, sd * im);
        let gain: Complex64 = h.subcarrier(k).iter().zip(f).map(|(a, b)| a * b).sum();
        noise.push(n);
        received.push(gain * x + n);
    }
    Ok(RxSignal {
        symbols: symbols.to_vec(),
        noise_variance,
        noise,
        received,
    })
}
