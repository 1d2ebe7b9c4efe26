//! Beam predictors: the multimodal transformer and three small baselines,
//! sharing one batch format and an `[B × M]` probability output.

mod baselines;
pub mod checkpoint;
mod mlm;
mod preprocess;

pub use baselines::{CnnConfig, DnnConfig, FusionConfig, FusionNet, PositionDnn, VisionCnn};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use mlm::{lora_linear, MlmModel, ModelConfig};
pub use preprocess::{
    denormalize_images, preprocess_images, CharTokenizer, TokenSequence, DEFAULT_VOCAB, PAD_ID,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Dataset, Sample};
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

/// Input geometry shared by every architecture, taken from a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    pub n_beams: usize,
    /// Extent used to map positions to `[-1, 1]` via `2x/L − 1`.
    pub extent: [f64; 3],
}

/// Vertical extent for position normalization; antennas sit well below it.
pub const HEIGHT_EXTENT: f64 = 10.0;

impl DataSpec {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let m = &ds.manifest;
        DataSpec {
            n_views: m.n_views,
            height: m.render.height,
            width: m.render.width,
            n_beams: m.n_beams,
            extent: [m.scene.length, m.scene.width, HEIGHT_EXTENT],
        }
    }

    pub fn pixels(&self) -> usize {
        self.n_views * self.height * self.width
    }

    pub fn normalize_position(&self, g: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| 2.0 * g[i] / self.extent[i] - 1.0)
    }
}

/// Network-ready samples: normalized views (one row of `N_c·H·W` per sample,
/// view-major) and raw positions in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub positions: Vec<[f64; 3]>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Every sample of a dataset preprocessed once with the manifest statistics.
#[derive(Clone, Debug)]
pub struct Featurized {
    pub spec: DataSpec,
    images: Vec<Vec<f64>>,
    positions: Vec<[f64; 3]>,
    labels: Vec<usize>,
}

impl Featurized {
    pub fn new(ds: &Dataset) -> Result<Self> {
        let spec = DataSpec::from_dataset(ds);
        let (mean, std) = (&ds.manifest.image_mean, &ds.manifest.image_std);
        let images = ds
            .samples
            .iter()
            .map(|s| preprocess_images(&s.views, mean, std).map(Tensor::into_data))
            .collect::<Result<_>>()?;
        Ok(Featurized {
            spec,
            images,
            positions: ds.samples.iter().map(position_of).collect(),
            labels: ds.samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(idx.len() * self.spec.pixels());
        for &i in idx {
            data.extend_from_slice(&self.images[i]);
        }
        Batch {
            images: Tensor::new(vec![idx.len(), self.spec.pixels()], data).expect("uniform images"),
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

pub fn position_of(s: &Sample) -> [f64; 3] {
    let p = s.pose.position;
    [p.x, p.y, p.z]
}

/// Per-forward state: train/eval mode, dropout randomness, and batch-norm
/// running statistics produced in training mode.
pub struct ForwardCtx {
    pub train: bool,
    pub rng: ChaCha8Rng,
    pub buffer_updates: Vec<(String, Tensor)>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            buffer_updates: Vec::new(),
        }
    }

    pub fn train(seed: u64) -> Self {
        ForwardCtx {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    MlmBp,
    DnnPos,
    CnnVis,
    Fusion,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::MlmBp, ModelKind::DnnPos, ModelKind::CnnVis, ModelKind::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MlmBp => "mlm-bp",
            ModelKind::DnnPos => "dnn-pos",
            ModelKind::CnnVis => "cnn-vis",
            ModelKind::Fusion => "fusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}; expected mlm-bp, dnn-pos, cnn-vis or fusion")))
    }
}

/// Architecture settings for every model kind; only the selected one is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub mlm: ModelConfig,
    pub dnn: DnnConfig,
    pub cnn: CnnConfig,
    pub fusion: FusionConfig,
}

#[derive(Clone, Debug)]
pub enum Model {
    Mlm(MlmModel),
    Dnn(PositionDnn),
    Cnn(VisionCnn),
    Fusion(FusionNet),
}

impl Model {
    pub fn new(kind: ModelKind, arch: &ArchConfig, spec: &DataSpec, seed: u64) -> Result<Model> {
        Ok(match kind {
            ModelKind::MlmBp => Model::Mlm(MlmModel::new(arch.mlm.clone(), spec.clone(), seed)?),
            ModelKind::DnnPos => Model::Dnn(PositionDnn::new(arch.dnn.clone(), spec.clone(), seed)?),
            ModelKind::CnnVis => Model::Cnn(VisionCnn::new(arch.cnn.clone(), spec.clone(), seed)?),
            ModelKind::Fusion => Model::Fusion(FusionNet::new(arch.fusion.clone(), spec.clone(), seed)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Mlm(_) => ModelKind::MlmBp,
            Model::Dnn(_) => ModelKind::DnnPos,
            Model::Cnn(_) => ModelKind::CnnVis,
            Model::Fusion(_) => ModelKind::Fusion,
        }
    }

    pub fn spec(&self) -> &DataSpec {
        match self {
            Model::Mlm(m) => &m.spec,
            Model::Dnn(m) => &m.spec,
            Model::Cnn(m) => &m.spec,
            Model::Fusion(m) => &m.spec,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Mlm(m) => &m.params,
            Model::Dnn(m) => &m.params,
            Model::Cnn(m) => &m.params,
            Model::Fusion(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Mlm(m) => &mut m.params,
            Model::Dnn(m) => &mut m.params,
            Model::Cnn(m) => &mut m.params,
            Model::Fusion(m) => &mut m.params,
        }
    }

    /// Records the forward pass on `tape`; returns `[B × M]` probabilities.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &Batch, ctx: &mut ForwardCtx) -> Result<Var> {
        match self {
            Model::Mlm(m) => m.forward(tape, bound, batch),
            Model::Dnn(m) => m.forward(tape, bound, batch),
            Model::Cnn(m) => m.forward(tape, bound, batch, ctx),
            Model::Fusion(m) => m.forward(tape, bound, batch, ctx),
        }
    }

    /// Evaluation-mode probabilities.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params().bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, batch, &mut ForwardCtx::eval())?;
        Ok(tape.value(out).clone())
    }
}

pub(crate) fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// `[out × in]` weight with variance `1/in`.
pub(crate) fn dense(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Tensor {
    normal(rng, &[out, inp], 1.0 / (inp as f64).sqrt())
}

/// `x·Wᵀ + b` with `W` stored `[out × in]`.
pub(crate) fn linear(tape: &mut Tape, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let y = tape.matmul_nt(x, bound.get(&format!("{prefix}.weight")))?;
    tape.add_row(y, bound.get(&format!("{prefix}.bias")))
}
