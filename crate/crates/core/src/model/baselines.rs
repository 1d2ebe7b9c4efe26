use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dense, linear, Batch, DataSpec, ForwardCtx};
use crate::error::{Error, Result};
use crate::tensor::{Bound, ConvGeom, ParamStore, Role, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

fn positions_tensor(spec: &DataSpec, batch: &Batch) -> Tensor {
    let rows: Vec<[f64; 3]> = batch.positions.iter().map(|g| spec.normalize_position(*g)).collect();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::new(vec![rows.len(), 3], flat).expect("three coordinates per row")
}

fn add_linear(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize) -> Result<()> {
    p.insert(format!("{name}.weight"), dense(rng, out, inp), Role::Trainable)?;
    p.insert(format!("{name}.bias"), Tensor::zeros(&[out]), Role::Trainable)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnnConfig {
    pub width: usize,
    pub n_blocks: usize,
}

impl Default for DnnConfig {
    fn default() -> Self {
        DnnConfig { width: 128, n_blocks: 5 }
    }
}

/// Normalized position → residual blocks of LayerNorm, linear and ReLU →
/// softmax over beams.
#[derive(Clone, Debug)]
pub struct PositionDnn {
    pub config: DnnConfig,
    pub spec: DataSpec,
    pub params: ParamStore,
}

impl PositionDnn {
    pub fn new(config: DnnConfig, spec: DataSpec, seed: u64) -> Result<Self> {
        if config.width == 0 {
            return Err(Error::Config("DNN width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let w = config.width;
        add_linear(&mut params, &mut rng, "dnn.stem", w, 3)?;
        for i in 0..config.n_blocks {
            params.insert(format!("dnn.{i}.norm.gain"), Tensor::ones(&[w]), Role::Trainable)?;
            params.insert(format!("dnn.{i}.norm.shift"), Tensor::zeros(&[w]), Role::Trainable)?;
            add_linear(&mut params, &mut rng, &format!("dnn.{i}.fc"), w, w)?;
        }
        add_linear(&mut params, &mut rng, "dnn.out", spec.n_beams, w)?;
        Ok(PositionDnn { config, spec, params })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &Batch) -> Result<Var> {
        let x = tape.constant(positions_tensor(&self.spec, batch));
        let mut h = linear(tape, bound, x, "dnn.stem")?;
        for i in 0..self.config.n_blocks {
            let b = format!("dnn.{i}");
            let n = tape.layer_norm(h, bound.get(&format!("{b}.norm.gain")), bound.get(&format!("{b}.norm.shift")), NORM_EPS)?;
            let n = linear(tape, bound, n, &format!("{b}.fc"))?;
            let n = tape.relu(n);
            h = tape.add(h, n)?;
        }
        let logits = linear(tape, bound, h, "dnn.out")?;
        Ok(tape.softmax_rows(logits))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            channels: vec![16, 32, 64],
            kernel: 3,
            dropout: 0.1,
            bn_momentum: 0.1,
        }
    }
}

impl CnnConfig {
    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.kernel == 0 {
            return Err(Error::Config("CNN needs at least one block with positive channels".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("dropout must lie in [0, 1) and momentum in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

fn add_conv_params(p: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &CnnConfig, spec: &DataSpec, prefix: &str) -> Result<()> {
    let mut c_in = spec.n_views;
    for (l, &c_out) in cfg.channels.iter().enumerate() {
        let b = format!("{prefix}.conv{l}");
        add_linear(p, rng, &b, c_out, cfg.kernel * cfg.kernel * c_in)?;
        p.insert(format!("{b}.bn.gain"), Tensor::ones(&[c_out]), Role::Trainable)?;
        p.insert(format!("{b}.bn.shift"), Tensor::zeros(&[c_out]), Role::Trainable)?;
        p.insert(format!("{b}.bn.running_mean"), Tensor::zeros(&[c_out]), Role::Buffer)?;
        p.insert(format!("{b}.bn.running_var"), Tensor::ones(&[c_out]), Role::Buffer)?;
        c_in = c_out;
    }
    Ok(())
}

/// Views as channels, channels-last rows `(b, y, x)`.
fn channels_last(spec: &DataSpec, images: &Tensor) -> Tensor {
    let (h, w, c) = (spec.height, spec.width, spec.n_views);
    let n_b = images.rows();
    let mut out = vec![0.0; n_b * h * w * c];
    for b in 0..n_b {
        let img = images.row(b);
        for v in 0..c {
            for p in 0..h * w {
                out[(b * h * w + p) * c + v] = img[v * h * w + p];
            }
        }
    }
    Tensor::new(vec![n_b * h * w, c], out).expect("consistent image size")
}

/// Strided conv blocks (conv → batch norm → ReLU → dropout) and global
/// average pooling: `[B × C_last]`.
fn conv_features(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &CnnConfig,
    spec: &DataSpec,
    images: &Tensor,
    ctx: &mut ForwardCtx,
    prefix: &str,
) -> Result<Var> {
    let n_b = images.rows();
    let mut x = tape.constant(channels_last(spec, images));
    let (mut h, mut w, mut c) = (spec.height, spec.width, spec.n_views);
    for (l, &c_out) in cfg.channels.iter().enumerate() {
        let b = format!("{prefix}.conv{l}");
        let geom = ConvGeom { batch: n_b, height: h, width: w, channels: c, kernel: cfg.kernel, stride: 2, pad: cfg.kernel / 2 };
        let cols = tape.im2col(x, geom)?;
        let y = linear(tape, bound, cols, &b)?;
        let (gain, shift) = (bound.get(&format!("{b}.bn.gain")), bound.get(&format!("{b}.bn.shift")));
        let (rm_name, rv_name) = (format!("{b}.bn.running_mean"), format!("{b}.bn.running_var"));
        let y = if ctx.train {
            let (y, mean, var) = tape.batch_norm(y, gain, shift, NORM_EPS)?;
            let m = cfg.bn_momentum;
            let rm = tape.value(bound.get(&rm_name)).data();
            let rv = tape.value(bound.get(&rv_name)).data();
            let rm: Vec<f64> = rm.iter().zip(&mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
            let rv: Vec<f64> = rv.iter().zip(&var).map(|(r, b)| (1.0 - m) * r + m * b).collect();
            ctx.buffer_updates.push((rm_name, Tensor::new(vec![c_out], rm)?));
            ctx.buffer_updates.push((rv_name, Tensor::new(vec![c_out], rv)?));
            y
        } else {
            let g = tape.value(gain).data();
            let sh = tape.value(shift).data();
            let rm = tape.value(bound.get(&rm_name)).data();
            let rv = tape.value(bound.get(&rv_name)).data();
            let s: Vec<f64> = (0..c_out).map(|j| g[j] / (rv[j] + NORM_EPS).sqrt()).collect();
            let t: Vec<f64> = (0..c_out).map(|j| sh[j] - rm[j] * s[j]).collect();
            let (s, t) = (tape.constant(Tensor::new(vec![c_out], s)?), tape.constant(Tensor::new(vec![c_out], t)?));
            let y = tape.mul_row(y, s)?;
            tape.add_row(y, t)?
        };
        let mut y = tape.relu(y);
        if ctx.train && cfg.dropout > 0.0 {
            let n = tape.value(y).len();
            let keep: Vec<bool> = (0..n).map(|_| ctx.rng.random::<f64>() >= cfg.dropout).collect();
            y = tape.dropout(y, &keep, cfg.dropout)?;
        }
        x = y;
        (h, w, c) = (geom.out_height(), geom.out_width(), c_out);
    }
    tape.mean_row_groups(x, h * w)
}

/// Stacked depth views → strided conv blocks → global average pool →
/// linear → softmax.
#[derive(Clone, Debug)]
pub struct VisionCnn {
    pub config: CnnConfig,
    pub spec: DataSpec,
    pub params: ParamStore,
}

impl VisionCnn {
    pub fn new(config: CnnConfig, spec: DataSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        add_conv_params(&mut params, &mut rng, &config, &spec, "cnn")?;
        add_linear(&mut params, &mut rng, "cnn.out", spec.n_beams, config.feature_dim())?;
        Ok(VisionCnn { config, spec, params })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &Batch, ctx: &mut ForwardCtx) -> Result<Var> {
        let f = conv_features(tape, bound, &self.config, &self.spec, &batch.images, ctx, "cnn")?;
        let logits = linear(tape, bound, f, "cnn.out")?;
        Ok(tape.softmax_rows(logits))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub cnn: CnnConfig,
    pub hidden: usize,
    /// Set to false to zero the image features (position-only ablation).
    pub image_branch: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            cnn: CnnConfig::default(),
            hidden: 128,
            image_branch: true,
        }
    }
}

/// CNN features concatenated with the normalized position, then a
/// two-hidden-layer MLP.
#[derive(Clone, Debug)]
pub struct FusionNet {
    pub config: FusionConfig,
    pub spec: DataSpec,
    pub params: ParamStore,
}

impl FusionNet {
    pub fn new(config: FusionConfig, spec: DataSpec, seed: u64) -> Result<Self> {
        config.cnn.validate()?;
        if config.hidden == 0 {
            return Err(Error::Config("fusion hidden width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        add_conv_params(&mut params, &mut rng, &config.cnn, &spec, "fusion.cnn")?;
        let d = config.cnn.feature_dim() + 3;
        add_linear(&mut params, &mut rng, "fusion.fc0", config.hidden, d)?;
        add_linear(&mut params, &mut rng, "fusion.fc1", config.hidden, config.hidden)?;
        add_linear(&mut params, &mut rng, "fusion.out", spec.n_beams, config.hidden)?;
        Ok(FusionNet { config, spec, params })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &Batch, ctx: &mut ForwardCtx) -> Result<Var> {
        let f = conv_features(tape, bound, &self.config.cnn, &self.spec, &batch.images, ctx, "fusion.cnn")?;
        let f = if self.config.image_branch { f } else { tape.scale(f, 0.0) };
        let g = tape.constant(positions_tensor(&self.spec, batch));
        let x = tape.concat_cols(&[f, g])?;
        let mut h = x;
        for l in ["fusion.fc0", "fusion.fc1"] {
            h = linear(tape, bound, h, l)?;
            h = tape.relu(h);
        }
        let logits = linear(tape, bound, h, "fusion.out")?;
        Ok(tape.softmax_rows(logits))
    }
}
