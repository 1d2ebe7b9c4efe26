use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-12;

/// `−(1/M)·Σ_i P_i·ln(max(P̂_i, 1e-12))` for a one-hot `p` over `M` beams.
pub fn cross_entropy(p: &[f64], p_hat: &[f64]) -> Result<f64> {
    if p.len() != p_hat.len() || p.is_empty() {
        return Err(Error::dim("cross_entropy", format!("{} vs {} entries", p.len(), p_hat.len())));
    }
    let total: f64 = p_hat.iter().sum();
    if (total - 1.0).abs() > 1e-6 || p_hat.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::Contract(format!("prediction is not a probability vector (sum {total})")));
    }
    let ones = p.iter().filter(|&&x| x == 1.0).count();
    if ones != 1 || p.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::Contract("ground truth must be one-hot".into()));
    }
    let m = p.len() as f64;
    Ok(-p.iter().zip(p_hat).map(|(t, q)| t * q.max(PROB_FLOOR).ln()).sum::<f64>() / m)
}

pub fn one_hot(label: usize, m: usize) -> Vec<f64> {
    let mut v = vec![0.0; m];
    v[label] = 1.0;
    v
}

/// Indices of the `k` largest entries, highest first; equal values keep
/// ascending index order.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Lowest-index argmax.
pub fn argmax(row: &[f64]) -> usize {
    top_k(row, 1)[0]
}

/// Fraction of samples whose true beam is among the `k` most probable.
pub fn topk_accuracy(truths: &[usize], preds: &Tensor, k: usize) -> Result<f64> {
    if truths.is_empty() || preds.rank() != 2 || preds.rows() != truths.len() {
        return Err(Error::dim("topk_accuracy", format!("{} truths for predictions {:?}", truths.len(), preds.shape())));
    }
    let m = preds.cols();
    if k < 1 || k > m {
        return Err(Error::Config(format!("K = {k} must lie in [1, {m}]")));
    }
    let hits = truths
        .iter()
        .enumerate()
        .filter(|&(i, &t)| top_k(preds.row(i), k).contains(&t))
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_top3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSummary {
    /// True beam ranked first.
    pub top1_hits: usize,
    /// True beam in the top three but not first.
    pub near_misses: usize,
    pub misses: usize,
    /// Most frequent (truth, predicted) disagreements.
    pub frequent_errors: Vec<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub split: String,
    /// Sample count `D`.
    pub n_samples: usize,
    /// K → accuracy.
    pub top_k_accuracy: BTreeMap<usize, f64>,
    pub mean_loss: f64,
    pub confusion: ConfusionSummary,
    pub loss_curve: Vec<EpochRecord>,
}

impl EvalReport {
    pub fn top1(&self) -> f64 {
        self.top_k_accuracy[&1]
    }

    pub fn top3(&self) -> f64 {
        self.top_k_accuracy[&3]
    }

    pub fn curve_csv(curve: &[EpochRecord]) -> String {
        let mut s = String::from("epoch,train_loss,val_top1,val_top3\n");
        for r in curve {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_top1, r.val_top3));
        }
        s
    }
}

/// Top-1/Top-3, mean loss and the confusion summary for predictions `preds`.
pub fn summarize(model: &str, split: &str, truths: &[usize], preds: &Tensor) -> Result<EvalReport> {
    let m = preds.cols();
    let mut top_k_accuracy = BTreeMap::new();
    for k in [1, 3] {
        top_k_accuracy.insert(k, topk_accuracy(truths, preds, k.min(m))?);
    }
    let mut loss = 0.0;
    let (mut hits, mut near) = (0, 0);
    let mut errors: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (i, &t) in truths.iter().enumerate() {
        let row = preds.row(i);
        loss += cross_entropy(&one_hot(t, m), row)?;
        let top = top_k(row, 3.min(m));
        if top[0] == t {
            hits += 1;
        } else {
            if top.contains(&t) {
                near += 1;
            }
            *errors.entry((t, top[0])).or_default() += 1;
        }
    }
    let mut frequent: Vec<(usize, usize, usize)> = errors.into_iter().map(|((t, p), c)| (t, p, c)).collect();
    frequent.sort_by(|a, b| b.2.cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    frequent.truncate(10);
    let n = truths.len();
    Ok(EvalReport {
        model: model.to_string(),
        split: split.to_string(),
        n_samples: n,
        top_k_accuracy,
        mean_loss: loss / n as f64,
        confusion: ConfusionSummary {
            top1_hits: hits,
            near_misses: near,
            misses: n - hits - near,
            frequent_errors: frequent,
        },
        loss_curve: Vec::new(),
    })
}
