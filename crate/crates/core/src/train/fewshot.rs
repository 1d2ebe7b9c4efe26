use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, mix_seed, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Featurized, Model, ModelKind};

/// Uniform (unstratified) subset of `train_idx` holding `round(ratio·n)`
/// samples. Subsets for one seed are nested across ratios and returned in
/// the original order, so ratio 1 reproduces `train_idx` exactly.
pub fn few_shot_subset(train_idx: &[usize], ratio: f64, seed: u64, batch_size: usize) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("few-shot ratio {ratio} must lie in (0, 1]")));
    }
    let n = ((ratio * train_idx.len() as f64).round() as usize).min(train_idx.len());
    if n < batch_size.max(1) {
        return Err(Error::Config(format!(
            "ratio {ratio} keeps {n} of {} training samples, fewer than one batch of {batch_size}",
            train_idx.len()
        )));
    }
    let mut pos: Vec<usize> = (0..train_idx.len()).collect();
    pos.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5eed])));
    let mut keep = pos[..n].to_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|p| train_idx[p]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotRun {
    pub seed: u64,
    pub n_train: usize,
    pub top1: f64,
    pub top3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotCell {
    pub model: String,
    pub ratio: f64,
    pub runs: Vec<FewShotRun>,
    pub mean_top1: f64,
    pub mean_top3: f64,
    /// Population standard deviation across seeds.
    pub spread_top1: f64,
    pub spread_top3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotTable {
    pub cells: Vec<FewShotCell>,
}

impl FewShotTable {
    pub fn cell(&self, model: ModelKind, ratio: f64) -> Option<&FewShotCell> {
        self.cells.iter().find(|c| c.model == model.name() && c.ratio == ratio)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,ratio,n_seeds,mean_top1,spread_top1,mean_top3,spread_top3\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.model,
                c.ratio,
                c.runs.len(),
                c.mean_top1,
                c.spread_top1,
                c.mean_top3,
                c.spread_top3
            ));
        }
        s
    }
}

fn mean_spread(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// For every ratio × seed: subsample the training split, train a fresh
/// model from scratch (initialized with that seed), select on the full
/// validation split and score the full test split.
#[allow(clippy::too_many_arguments)]
pub fn few_shot_protocol(
    kind: ModelKind,
    arch: &ArchConfig,
    data: &Featurized,
    splits: (&[usize], &[usize], &[usize]),
    ratios: &[f64],
    seeds: &[u64],
    config: &TrainConfig,
    mut progress: impl FnMut(&str),
) -> Result<FewShotTable> {
    let (train, val, test) = splits;
    if seeds.is_empty() || ratios.is_empty() {
        return Err(Error::Config("few-shot grid needs at least one ratio and one seed".into()));
    }
    // validate the whole grid before spending compute on it
    for &r in ratios {
        few_shot_subset(train, r, seeds[0], config.batch_size)?;
    }
    let mut cells = Vec::new();
    for &ratio in ratios {
        let mut runs = Vec::new();
        for &seed in seeds {
            let subset = few_shot_subset(train, ratio, seed, config.batch_size)?;
            let cfg = TrainConfig { seed, few_shot_ratio: Some(ratio), ..config.clone() };
            let model = Model::new(kind, arch, &data.spec, seed)?;
            let mut trainer = Trainer::new(arch.clone(), cfg, data, subset.clone(), val.to_vec());
            let out = trainer.train(model, seed)?;
            let report = evaluate(&out.best, data, test, "test", config.eval_batch_size)?;
            progress(&format!(
                "{} ratio={ratio} seed={seed} n={} top1={:.4} top3={:.4}",
                kind.name(),
                subset.len(),
                report.top1(),
                report.top3()
            ));
            runs.push(FewShotRun { seed, n_train: subset.len(), top1: report.top1(), top3: report.top3() });
        }
        let (mean_top1, spread_top1) = mean_spread(&runs.iter().map(|r| r.top1).collect::<Vec<_>>());
        let (mean_top3, spread_top3) = mean_spread(&runs.iter().map(|r| r.top3).collect::<Vec<_>>());
        cells.push(FewShotCell {
            model: kind.name().to_string(),
            ratio,
            runs,
            mean_top1,
            mean_top3,
            spread_top1,
            spread_top3,
        });
    }
    Ok(FewShotTable { cells })
}
