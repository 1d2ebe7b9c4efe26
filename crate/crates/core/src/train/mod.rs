//! Mini-batch training with Adam, validation-based model selection,
//! checkpoint/resume, and the few-shot subset protocol.

mod fewshot;
mod metrics;

pub use fewshot::{few_shot_protocol, few_shot_subset, FewShotCell, FewShotRun, FewShotTable};
pub use metrics::{
    argmax, cross_entropy, one_hot, summarize, top_k, topk_accuracy, ConfusionSummary,
    EpochRecord, EvalReport, PROB_FLOOR,
};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, ArchConfig, Featurized, ForwardCtx, Model};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub few_shot_ratio: Option<f64>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            learning_rate: 1e-4,
            epochs: 30,
            seed: 0,
            few_shot_ratio: None,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if let Some(r) = self.few_shot_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("few-shot ratio {r} must lie in (0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z = 0x51_7c_c1_b7_27_22_0a_95u64;
    for &p in parts {
        z ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Evaluation-mode probabilities for `idx`, `[len × M]`.
pub fn predict(model: &Model, data: &Featurized, idx: &[usize], batch_size: usize) -> Result<Tensor> {
    let m = model.spec().n_beams;
    let mut out = Vec::with_capacity(idx.len() * m);
    for chunk in idx.chunks(batch_size.max(1)) {
        let p = model.predict(&data.batch(chunk))?;
        p.check_finite("prediction")?;
        out.extend_from_slice(p.data());
    }
    Tensor::new(vec![idx.len(), m], out)
}

pub fn evaluate(model: &Model, data: &Featurized, idx: &[usize], split: &str, batch_size: usize) -> Result<EvalReport> {
    if idx.is_empty() {
        return Err(Error::Config(format!("the {split} split is empty")));
    }
    let preds = predict(model, data, idx, batch_size)?;
    let truths: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
    summarize(model.kind().name(), split, &truths, &preds)
}

fn warm_start_epochs(model: &Model) -> usize {
    match model {
        Model::Mlm(m) => m.config.warm_start_epochs,
        _ => 0,
    }
}

/// Progress stored alongside checkpoints so a run can resume exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub best_epoch: Option<usize>,
    pub best_val_top1: f64,
    pub curve: Vec<EpochRecord>,
    pub config: TrainConfig,
    pub init_seed: u64,
}

pub struct TrainOutcome {
    /// Weights with the best validation Top-1 (the initial weights when no
    /// epoch ran).
    pub best: Model,
    pub last: Model,
    pub state: TrainState,
}

pub const CHECKPOINT_BEST: &str = "checkpoint_best";
pub const CHECKPOINT_LAST: &str = "checkpoint_last";

pub struct Trainer<'a> {
    pub arch: ArchConfig,
    pub config: TrainConfig,
    pub data: &'a Featurized,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    /// Where `checkpoint_best/` and `checkpoint_last/` go after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord) + 'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(arch: ArchConfig, config: TrainConfig, data: &'a Featurized, train_idx: Vec<usize>, val_idx: Vec<usize>) -> Self {
        Trainer { arch, config, data, train_idx, val_idx, checkpoint_dir: None, on_epoch: None }
    }

    /// Mean per-beam cross-entropy of one batch, recorded on `tape`.
    fn batch_loss(model: &Model, tape: &mut Tape, bound: &crate::tensor::Bound, batch: &crate::model::Batch, ctx: &mut ForwardCtx) -> Result<crate::tensor::Var> {
        let probs = model.forward(tape, bound, batch, ctx)?;
        let m = tape.value(probs).cols() as f64;
        let nll = tape.nll_clamped(probs, &batch.labels, PROB_FLOOR)?;
        let mean = tape.mean(nll);
        Ok(tape.scale(mean, 1.0 / m))
    }

    fn run_epoch(&self, model: &mut Model, adam: &mut AdamState, epoch: usize) -> Result<f64> {
        let unfreeze = epoch < warm_start_epochs(model);
        let mut order = self.train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, epoch as u64])));
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch = self.data.batch(chunk);
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, unfreeze);
            let mut ctx = ForwardCtx::train(mix_seed(&[self.config.seed, epoch as u64, bi as u64]));
            let loss = Self::batch_loss(model, &mut tape, &bound, &batch, &mut ctx)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("loss became {value} at epoch {epoch}, batch {bi}")));
            }
            total += value * chunk.len() as f64;
            let mut grads = tape.backward(loss)?;
            let params = model.params_mut();
            params.absorb(&bound, &mut grads);
            adam.step(params, unfreeze)?;
            for (name, t) in ctx.buffer_updates {
                params.set_value(&name, t)?;
            }
        }
        for p in model.params().iter() {
            p.value.check_finite(&p.name)?;
        }
        Ok(total / self.train_idx.len() as f64)
    }

    fn save(&self, dir: &Path, model: &Model, adam: Option<&AdamState>, state: &TrainState) -> Result<()> {
        save_checkpoint(dir, model, &self.arch, adam, serde_json::to_value(state)?)
    }

    /// Trains `model` for the configured epochs.
    pub fn train(&mut self, model: Model, init_seed: u64) -> Result<TrainOutcome> {
        let state = TrainState {
            epochs_done: 0,
            best_epoch: None,
            best_val_top1: f64::NEG_INFINITY,
            curve: Vec::new(),
            config: self.config.clone(),
            init_seed,
        };
        let adam = AdamState::new(AdamConfig::with_lr(self.config.learning_rate));
        self.run(model.clone(), model, adam, state)
    }

    /// Continues the run stored in `dir` (`checkpoint_last/` and
    /// `checkpoint_best/`) until the configured epoch count.
    pub fn resume(&mut self, dir: &Path) -> Result<TrainOutcome> {
        let last = load_checkpoint(&dir.join(CHECKPOINT_LAST))?;
        let best = load_checkpoint(&dir.join(CHECKPOINT_BEST))?;
        let state: TrainState = serde_json::from_value(last.manifest.state.clone())
            .map_err(|e| Error::Integrity(format!("checkpoint progress record: {e}")))?;
        let adam = last.adam.ok_or_else(|| Error::Integrity("last checkpoint lacks optimizer state".into()))?;
        self.run(best.model, last.model, adam, state)
    }

    fn run(&mut self, mut best: Model, mut model: Model, mut adam: AdamState, mut state: TrainState) -> Result<TrainOutcome> {
        self.config.validate()?;
        if self.train_idx.is_empty() {
            return Err(Error::Config("the training split is empty".into()));
        }
        if self.val_idx.is_empty() {
            return Err(Error::Config("the validation split is empty".into()));
        }
        adam.config.learning_rate = self.config.learning_rate;
        for epoch in state.epochs_done..self.config.epochs {
            let train_loss = self.run_epoch(&mut model, &mut adam, epoch)?;
            let val = evaluate(&model, self.data, &self.val_idx, "val", self.config.eval_batch_size)?;
            let rec = EpochRecord { epoch: epoch + 1, train_loss, val_top1: val.top1(), val_top3: val.top3() };
            if let Some(cb) = self.on_epoch.as_mut() {
                cb(&rec);
            }
            if rec.val_top1 > state.best_val_top1 {
                state.best_val_top1 = rec.val_top1;
                state.best_epoch = Some(epoch + 1);
                best = model.clone();
            }
            state.curve.push(rec);
            state.epochs_done = epoch + 1;
            if let Some(dir) = &self.checkpoint_dir {
                self.save(&dir.join(CHECKPOINT_LAST), &model, Some(&adam), &state)?;
                if state.best_epoch == Some(epoch + 1) {
                    self.save(&dir.join(CHECKPOINT_BEST), &best, None, &state)?;
                }
            }
        }
        if let Some(dir) = &self.checkpoint_dir {
            if state.best_epoch.is_none() {
                self.save(&dir.join(CHECKPOINT_BEST), &best, None, &state)?;
                self.save(&dir.join(CHECKPOINT_LAST), &model, Some(&adam), &state)?;
            }
        }
        Ok(TrainOutcome { best, last: model, state })
    }
}
