use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::DepthView;
use crate::tensor::Tensor;

/// Standard deviations below this are treated as 1 so constant views do not
/// blow up.
const MIN_STD: f64 = 1e-12;

fn safe_std(s: f64) -> f64 {
    if s > MIN_STD {
        s
    } else {
        1.0
    }
}

/// Stacks the views into `[N_c × H·W]` and applies `(x − mean_c) / std_c`
/// per view.
pub fn preprocess_images(views: &[DepthView], mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let Some(first) = views.first() else {
        return Err(Error::dim("preprocess_images", "no views"));
    };
    if mean.len() != views.len() || std.len() != views.len() {
        return Err(Error::dim(
            "preprocess_images",
            format!("{} views but {} means / {} stds", views.len(), mean.len(), std.len()),
        ));
    }
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(views.len() * w * h);
    for (c, v) in views.iter().enumerate() {
        if (v.width, v.height) != (w, h) || v.pixels.len() != w * h {
            return Err(Error::dim(
                "preprocess_images",
                format!("view {c} is {}x{}, expected {w}x{h}", v.width, v.height),
            ));
        }
        let s = safe_std(std[c]);
        data.extend(v.pixels.iter().map(|&p| (p as f64 - mean[c]) / s));
    }
    Tensor::new(vec![views.len(), w * h], data)
}

/// Inverse of [`preprocess_images`].
pub fn denormalize_images(t: &Tensor, mean: &[f64], std: &[f64]) -> Result<Vec<Vec<f64>>> {
    if t.rank() != 2 || t.rows() != mean.len() || t.rows() != std.len() {
        return Err(Error::dim("denormalize_images", format!("{:?} for {} views", t.shape(), mean.len())));
    }
    Ok((0..t.rows())
        .map(|c| t.row(c).iter().map(|x| x * safe_std(std[c]) + mean[c]).collect())
        .collect())
}

/// Characters accepted by the position tokenizer; id 0 is padding and
/// character `i` of this table has id `i + 1`.
pub const DEFAULT_VOCAB: &str = " ,-.0123456789:Pinost";

pub const PAD_ID: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharTokenizer {
    vocab: Vec<char>,
    max_len: usize,
}

impl CharTokenizer {
    pub fn new(vocab: &str, max_len: usize) -> Result<Self> {
        let chars: Vec<char> = vocab.chars().collect();
        let mut sorted = chars.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != chars.len() {
            return Err(Error::Config("tokenizer vocabulary repeats a character".into()));
        }
        if let Some(c) = "Position: 0123456789.,-".chars().find(|c| !chars.contains(c)) {
            return Err(Error::Config(format!("vocabulary lacks {c:?} needed for positions")));
        }
        if max_len == 0 {
            return Err(Error::Config("token length must be positive".into()));
        }
        Ok(CharTokenizer { vocab: chars, max_len })
    }

    /// Number of ids including padding.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let n = text.chars().count();
        if n > self.max_len {
            return Err(Error::Config(format!(
                "{text:?} has {n} characters, more than the {} token slots",
                self.max_len
            )));
        }
        let mut ids = Vec::with_capacity(self.max_len);
        for c in text.chars() {
            let i = self
                .vocab
                .iter()
                .position(|&v| v == c)
                .ok_or_else(|| Error::Config(format!("character {c:?} is not in the vocabulary")))?;
            ids.push(i + 1);
        }
        ids.resize(self.max_len, PAD_ID);
        Ok(TokenSequence { ids, text: text.to_string() })
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .filter(|&&i| i != PAD_ID)
            .map(|&i| {
                self.vocab
                    .get(i - 1)
                    .copied()
                    .ok_or_else(|| Error::Contract(format!("token id {i} outside the vocabulary")))
            })
            .collect()
    }

    pub fn tokenize_position(&self, g: [f64; 3]) -> Result<TokenSequence> {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("position {g:?} is not finite")));
        }
        self.encode(&format!("Position: {:.2}, {:.2}, {:.2}", g[0], g[1], g[2]))
    }
}
