use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::preprocess::{CharTokenizer, DEFAULT_VOCAB};
use super::{dense, linear, normal, Batch, DataSpec};
use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamStore, Role, Tape, Tensor, Var, RMS_EPS};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_m: usize,
    pub d_v: usize,
    pub n_heads: usize,
    pub n_encoder_blocks: usize,
    pub n_decoder_blocks: usize,
    /// Text token slots `L_p`.
    pub l_p: usize,
    pub patch_size: usize,
    pub rope_base: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Hidden width of the feed-forward layers as a multiple of the block width.
    pub ffn_mult: usize,
    pub vocab: String,
    /// Scale attention logits by `1/sqrt(d_m)` instead of `1/sqrt(d_head)`.
    pub model_dim_attention_scale: bool,
    /// Epochs during which every weight trains before the base weights freeze.
    pub warm_start_epochs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_m: 64,
            d_v: 64,
            n_heads: 4,
            n_encoder_blocks: 2,
            n_decoder_blocks: 2,
            l_p: 32,
            patch_size: 8,
            rope_base: 10_000.0,
            lora_rank: 8,
            lora_alpha: 32.0,
            ffn_mult: 2,
            vocab: DEFAULT_VOCAB.to_string(),
            model_dim_attention_scale: false,
            warm_start_epochs: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, spec: &DataSpec) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_m % self.n_heads != 0 || self.d_v % self.n_heads != 0 {
            return bad(format!("d_m={} and d_v={} must both divide into {} heads", self.d_m, self.d_v, self.n_heads));
        }
        if (self.d_m / self.n_heads) % 2 != 0 {
            return bad(format!("decoder head dim {} must be even for rotary embedding", self.d_m / self.n_heads));
        }
        if self.d_m < 4 || self.ffn_mult == 0 {
            return bad("d_m must be at least 4 and ffn_mult positive".into());
        }
        if self.lora_rank == 0 || self.lora_rank >= self.d_v {
            return bad(format!("LoRA rank {} must lie in [1, d_v={})", self.lora_rank, self.d_v));
        }
        let p = self.patch_size;
        if p == 0 || spec.height % p != 0 || spec.width % p != 0 {
            return bad(format!("{}x{} views do not split into {p}x{p} patches", spec.width, spec.height));
        }
        if spec.n_beams == 0 {
            return bad("codebook is empty".into());
        }
        CharTokenizer::new(&self.vocab, self.l_p).map(|_| ())
    }

    pub fn n_image_tokens(&self, spec: &DataSpec) -> usize {
        spec.n_views * (spec.height / self.patch_size) * (spec.width / self.patch_size)
    }
}

/// `x·W_0ᵀ + (α/r)·(x·Aᵀ)·Bᵀ` with `A: [r × d_in]`, `B: [d_out × r]`; the
/// adapted weight is never materialized.
pub fn lora_linear(tape: &mut Tape, x: Var, base: Var, a: Var, b: Var, alpha: f64) -> Result<Var> {
    let rank = tape.value(a).rows();
    let d = tape.value(base).cols().min(tape.value(base).rows());
    if rank >= d {
        return Err(Error::Config(format!("LoRA rank {rank} must be below the layer width {d}")));
    }
    let y = tape.matmul_nt(x, base)?;
    let xa = tape.matmul_nt(x, a)?;
    let xab = tape.matmul_nt(xa, b)?;
    let delta = tape.scale(xab, alpha / rank as f64);
    tape.add(y, delta)
}

#[derive(Clone, Debug)]
pub struct MlmModel {
    pub config: ModelConfig,
    pub spec: DataSpec,
    pub params: ParamStore,
    tokenizer: CharTokenizer,
}

fn is_trainable(name: &str) -> bool {
    name.ends_with(".lora_a")
        || name.ends_with(".lora_b")
        || name.ends_with(".gain")
        || name.ends_with(".shift")
        || name.starts_with("aligner.")
        || name.starts_with("patch.")
        || name.starts_with("tok.")
        || name.starts_with("head.")
}

impl MlmModel {
    pub fn new(config: ModelConfig, spec: DataSpec, seed: u64) -> Result<Self> {
        config.validate(&spec)?;
        let tokenizer = CharTokenizer::new(&config.vocab, config.l_p)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut add = |name: String, t: Tensor| {
            let role = if is_trainable(&name) { Role::Trainable } else { Role::Frozen };
            params.insert(name, t, role)
        };
        let (dv, dm, r) = (config.d_v, config.d_m, config.lora_rank);
        let p2 = config.patch_size * config.patch_size;
        let n_img = config.n_image_tokens(&spec);
        let residual = 1.0 / ((2 * (config.n_encoder_blocks + config.n_decoder_blocks).max(1)) as f64).sqrt();

        add("patch.weight".into(), dense(&mut rng, dv, p2))?;
        add("patch.bias".into(), Tensor::zeros(&[dv]))?;
        add("patch.pos".into(), normal(&mut rng, &[n_img, dv], 0.1))?;
        for i in 0..config.n_encoder_blocks {
            let b = format!("enc.{i}");
            add(format!("{b}.ln1.gain"), Tensor::ones(&[dv]))?;
            add(format!("{b}.ln1.shift"), Tensor::zeros(&[dv]))?;
            for proj in ["q", "k", "v"] {
                add(format!("{b}.{proj}.base"), dense(&mut rng, dv, dv))?;
                add(format!("{b}.{proj}.lora_a"), dense(&mut rng, r, dv))?;
                add(format!("{b}.{proj}.lora_b"), Tensor::zeros(&[dv, r]))?;
            }
            add(format!("{b}.o.weight"), dense(&mut rng, dv, dv).map(|w| w * residual))?;
            add(format!("{b}.ln2.gain"), Tensor::ones(&[dv]))?;
            add(format!("{b}.ln2.shift"), Tensor::zeros(&[dv]))?;
            let hid = config.ffn_mult * dv;
            add(format!("{b}.mlp.in.weight"), dense(&mut rng, hid, dv))?;
            add(format!("{b}.mlp.in.bias"), Tensor::zeros(&[hid]))?;
            add(format!("{b}.mlp.out.weight"), dense(&mut rng, dv, hid).map(|w| w * residual))?;
            add(format!("{b}.mlp.out.bias"), Tensor::zeros(&[dv]))?;
        }
        add("enc.ln_f.gain".into(), Tensor::ones(&[dv]))?;
        add("enc.ln_f.shift".into(), Tensor::zeros(&[dv]))?;
        add("aligner.weight".into(), dense(&mut rng, dm, dv))?;
        add("aligner.bias".into(), Tensor::zeros(&[dm]))?;
        add("tok.embed".into(), normal(&mut rng, &[tokenizer.vocab_size(), dm], 1.0))?;
        for i in 0..config.n_decoder_blocks {
            let b = format!("dec.{i}");
            add(format!("{b}.norm1.gain"), Tensor::ones(&[dm]))?;
            for proj in ["q", "k", "v"] {
                add(format!("{b}.{proj}.weight"), dense(&mut rng, dm, dm))?;
            }
            add(format!("{b}.o.weight"), dense(&mut rng, dm, dm).map(|w| w * residual))?;
            add(format!("{b}.norm2.gain"), Tensor::ones(&[dm]))?;
            let hid = config.ffn_mult * dm;
            // stored [in × out] for the gated feed-forward
            add(format!("{b}.ffn.gate"), dense(&mut rng, hid, dm).transpose()?)?;
            add(format!("{b}.ffn.up"), dense(&mut rng, hid, dm).transpose()?)?;
            add(format!("{b}.ffn.down"), dense(&mut rng, dm, hid).map(|w| w * residual).transpose()?)?;
        }
        add("dec.norm_f.gain".into(), Tensor::ones(&[dm]))?;
        let widths = [dm, dm, dm / 2, dm / 4];
        for (j, w) in widths.windows(2).enumerate() {
            add(format!("head.{j}.weight"), dense(&mut rng, w[1], w[0]))?;
            add(format!("head.{j}.bias"), Tensor::zeros(&[w[1]]))?;
        }
        add("head.out.weight".into(), dense(&mut rng, spec.n_beams, dm / 4))?;
        add("head.out.bias".into(), Tensor::zeros(&[spec.n_beams]))?;
        Ok(MlmModel { config, spec, params, tokenizer })
    }

    pub fn tokenizer(&self) -> &CharTokenizer {
        &self.tokenizer
    }

    pub fn n_image_tokens(&self) -> usize {
        self.config.n_image_tokens(&self.spec)
    }

    pub fn seq_len(&self) -> usize {
        self.n_image_tokens() + self.config.l_p
    }

    /// Non-overlapping `p×p` patches of every view, `[B·P × p²]`, ordered by
    /// view, then patch row, then patch column.
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let (h, w, p) = (self.spec.height, self.spec.width, self.config.patch_size);
        if images.rank() != 2 || images.cols() != self.spec.pixels() {
            return Err(Error::dim("patchify", format!("images {:?}, expected [B x {}]", images.shape(), self.spec.pixels())));
        }
        let (gh, gw) = (h / p, w / p);
        let n_b = images.rows();
        let mut out = Vec::with_capacity(n_b * self.n_image_tokens() * p * p);
        for b in 0..n_b {
            let img = images.row(b);
            for v in 0..self.spec.n_views {
                let view = &img[v * h * w..(v + 1) * h * w];
                for py in 0..gh {
                    for px in 0..gw {
                        for i in 0..p {
                            let row = (py * p + i) * w + px * p;
                            out.extend_from_slice(&view[row..row + p]);
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n_b * self.n_image_tokens(), p * p], out)
    }

    /// Projected patches plus the learned positional encoding, `[B·P × d_v]`.
    pub fn patch_embed(&self, tape: &mut Tape, bound: &Bound, patches: Var) -> Result<Var> {
        let n = self.n_image_tokens();
        let rows = tape.value(patches).rows();
        if rows % n != 0 {
            return Err(Error::dim("patch_embed", format!("{rows} patch rows for {n} tokens per sample")));
        }
        let proj = linear(tape, bound, patches, "patch")?;
        let idx: Vec<usize> = (0..rows).map(|r| r % n).collect();
        let pos = tape.gather_rows(bound.get("patch.pos"), &idx)?;
        tape.add(proj, pos)
    }

    fn attention_scale(&self, width: usize) -> f64 {
        if self.config.model_dim_attention_scale {
            1.0 / (self.config.d_m as f64).sqrt()
        } else {
            1.0 / ((width / self.config.n_heads) as f64).sqrt()
        }
    }

    /// Bidirectional pre-norm encoder with LoRA on Q/K/V, then the aligner to
    /// `d_m`: `[B·P × d_v] → [B·P × d_m]`.
    pub fn encoder_forward(&self, tape: &mut Tape, bound: &Bound, pe: Var, lora: bool) -> Result<Var> {
        let c = &self.config;
        let seq = self.n_image_tokens();
        let scale = self.attention_scale(c.d_v);
        let mut x = pe;
        for i in 0..c.n_encoder_blocks {
            let b = format!("enc.{i}");
            let h = tape.layer_norm(x, bound.get(&format!("{b}.ln1.gain")), bound.get(&format!("{b}.ln1.shift")), LN_EPS)?;
            let mut qkv = [h; 3];
            for (slot, proj) in qkv.iter_mut().zip(["q", "k", "v"]) {
                let base = bound.get(&format!("{b}.{proj}.base"));
                *slot = if lora {
                    let a = bound.get(&format!("{b}.{proj}.lora_a"));
                    let bb = bound.get(&format!("{b}.{proj}.lora_b"));
                    lora_linear(tape, h, base, a, bb, c.lora_alpha)?
                } else {
                    tape.matmul_nt(h, base)?
                };
            }
            let att = tape.attention(qkv[0], qkv[1], qkv[2], seq, c.n_heads, false, scale)?;
            let o = tape.matmul_nt(att, bound.get(&format!("{b}.o.weight")))?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, bound.get(&format!("{b}.ln2.gain")), bound.get(&format!("{b}.ln2.shift")), LN_EPS)?;
            let h = linear(tape, bound, h, &format!("{b}.mlp.in"))?;
            let h = tape.gelu(h);
            let h = linear(tape, bound, h, &format!("{b}.mlp.out"))?;
            x = tape.add(x, h)?;
        }
        let x = tape.layer_norm(x, bound.get("enc.ln_f.gain"), bound.get("enc.ln_f.shift"), LN_EPS)?;
        linear(tape, bound, x, "aligner")
    }

    /// Text embeddings `[B·L_p × d_m]` for raw positions.
    pub fn text_embed(&self, tape: &mut Tape, bound: &Bound, positions: &[[f64; 3]]) -> Result<Var> {
        let mut ids = Vec::with_capacity(positions.len() * self.config.l_p);
        for g in positions {
            ids.extend(self.tokenizer.tokenize_position(*g)?.ids);
        }
        tape.gather_rows(bound.get("tok.embed"), &ids)
    }

    /// Causal decoder stack over `[B·seq × d_m]`, ending in the final
    /// RMSNorm (`L_o`).
    pub fn decoder_forward(&self, tape: &mut Tape, bound: &Bound, x: Var, seq: usize) -> Result<Var> {
        let c = &self.config;
        let scale = self.attention_scale(c.d_m);
        let mut x = x;
        for i in 0..c.n_decoder_blocks {
            let b = format!("dec.{i}");
            let h = tape.rms_norm(x, bound.get(&format!("{b}.norm1.gain")), RMS_EPS)?;
            let q = tape.matmul_nt(h, bound.get(&format!("{b}.q.weight")))?;
            let k = tape.matmul_nt(h, bound.get(&format!("{b}.k.weight")))?;
            let v = tape.matmul_nt(h, bound.get(&format!("{b}.v.weight")))?;
            let q = tape.rope(q, seq, c.n_heads, c.rope_base, 0)?;
            let k = tape.rope(k, seq, c.n_heads, c.rope_base, 0)?;
            let att = tape.attention(q, k, v, seq, c.n_heads, true, scale)?;
            let o = tape.matmul_nt(att, bound.get(&format!("{b}.o.weight")))?;
            x = tape.add(x, o)?;
            let h = tape.rms_norm(x, bound.get(&format!("{b}.norm2.gain")), RMS_EPS)?;
            let f = tape.swiglu(
                h,
                bound.get(&format!("{b}.ffn.gate")),
                bound.get(&format!("{b}.ffn.up")),
                bound.get(&format!("{b}.ffn.down")),
            )?;
            x = tape.add(x, f)?;
        }
        tape.rms_norm(x, bound.get("dec.norm_f.gain"), RMS_EPS)
    }

    /// Mean pooling over the sequence, the swish MLP head and softmax.
    pub fn head(&self, tape: &mut Tape, bound: &Bound, lo: Var, seq: usize) -> Result<Var> {
        let mut h = tape.mean_row_groups(lo, seq)?;
        for j in 0..3 {
            h = linear(tape, bound, h, &format!("head.{j}"))?;
            h = tape.silu(h);
        }
        let logits = linear(tape, bound, h, "head.out")?;
        Ok(tape.softmax_rows(logits))
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &Batch) -> Result<Var> {
        self.forward_opts(tape, bound, batch, true)
    }

    /// Full pipeline; `lora = false` skips the adapter branch entirely.
    pub fn forward_opts(&self, tape: &mut Tape, bound: &Bound, batch: &Batch, lora: bool) -> Result<Var> {
        let n_b = batch.len();
        let (n_img, l_p) = (self.n_image_tokens(), self.config.l_p);
        let patches = tape.constant(self.patchify(&batch.images)?);
        let pe = self.patch_embed(tape, bound, patches)?;
        let ie = self.encoder_forward(tape, bound, pe, lora)?;
        let te = self.text_embed(tape, bound, &batch.positions)?;
        let mut parts = Vec::with_capacity(2 * n_b);
        for b in 0..n_b {
            parts.push(tape.slice_rows(ie, b * n_img, n_img)?);
            parts.push(tape.slice_rows(te, b * l_p, l_p)?);
        }
        let x = tape.concat_rows(&parts)?;
        let seq = n_img + l_p;
        let lo = self.decoder_forward(tape, bound, x, seq)?;
        self.head(tape, bound, lo, seq)
    }
}
