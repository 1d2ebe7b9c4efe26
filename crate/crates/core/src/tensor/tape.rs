//! Linear tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value, its parents and
//! whatever intermediates the backward rule needs. Node order is a valid
//! topological order, so the backward pass is a single reverse sweep.

use std::collections::HashMap;

use super::gemm::{gemm, gemm_at, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// For each output row and patch column, the flat input index (or `None` for padding).
    fn for_each_tap(&self, mut f: impl FnMut(usize, Option<usize>)) {
        let (oh, ow, k, c) = (self.out_height(), self.out_width(), self.kernel, self.channels);
        let plen = self.patch_len();
        for n in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let out_row = (n * oh + oy) * ow + ox;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            let inside = iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.height
                                && (ix as usize) < self.width;
                            for ch in 0..c {
                                let out_idx = out_row * plen + (ky * k + kx) * c + ch;
                                let src = inside.then(|| {
                                    ((n * self.height + iy as usize) * self.width + ix as usize) * c
                                        + ch
                                });
                                f(out_idx, src);
                            }
                        }
                    }
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    MulRow { x: Var, gain: Var },
    Scale(Var, f64),
    Sum(Var),
    MeanRowGroups { x: Var, group: usize },
    Softmax { x: Var },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Silu(Var),
    Gelu(Var),
    Relu(Var),
    Rope { x: Var, cos: Vec<f64>, sin: Vec<f64>, head_dim: usize },
    Attention(Box<AttentionSaved>),
    GatherRows { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Im2Col { x: Var, geom: ConvGeom },
    Dropout { x: Var, mask: Vec<f64> },
    NllClamped { probs: Var, targets: Vec<usize>, floor: f64 },
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    seq: usize,
    heads: usize,
    scale: f64,
    probs: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf handle.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of `row` in place; entries with index > `limit` are zeroed.
fn softmax_in_place(row: &mut [f64], limit: usize) {
    let live = &mut row[..=limit];
    let max = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in live.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in live.iter_mut() {
        *x /= total;
    }
    row[limit + 1..].fill(0.0);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn row_vector(&self, op: &'static str, x: Var, v: Var) -> Result<()> {
        let (cols, len) = (self.value(x).cols(), self.value(v).len());
        if cols != len {
            return Err(Error::dim(op, format!("row vector of {len} for {cols} columns")));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::dim(op, format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (br, bc) = self.matrix_dims("matmul", b)?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::dim(
                "matmul",
                format!("[{m}x{k}] x [{br}x{bc}]{}", if trans_b { "ᵀ" } else { "" }),
            ));
        }
        let bv = MatRef::row_major(self.value(b).data(), bc);
        let bv = if trans_b { bv.t() } else { bv };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, MatRef::row_major(self.value(a).data(), k), bv, &mut out, n, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.row_vector("add_row", x, bias)?;
        let t = self.value(x);
        let bv = self.value(bias).data();
        let c = t.cols();
        let v = Tensor::from_fn(t.shape(), |i| t.data()[i] + bv[i % c]);
        Ok(self.push(v, Op::AddRow { x, bias }, &[x, bias]))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.row_vector("mul_row", x, gain)?;
        let t = self.value(x);
        let gv = self.value(gain).data();
        let c = t.cols();
        let v = Tensor::from_fn(t.shape(), |i| t.data()[i] * gv[i % c]);
        Ok(self.push(v, Op::MulRow { x, gain }, &[x, gain]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).map(|e| e * factor);
        self.push(v, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over consecutive groups of `group` rows: `[g·n × c] -> [n × c]`.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if group == 0 || rows % group != 0 {
            return Err(Error::dim("mean_row_groups", format!("{rows} rows in groups of {group}")));
        }
        let n = rows / group;
        let mut out = vec![0.0; n * cols];
        for r in 0..rows {
            let o = (r / group) * cols;
            for (acc, &e) in out[o..o + cols].iter_mut().zip(t.row(r)) {
                *acc += e;
            }
        }
        out.iter_mut().for_each(|e| *e /= group as f64);
        let v = Tensor::new(vec![n, cols], out)?;
        Ok(self.push(v, Op::MeanRowGroups { x, group }, &[x]))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let c = v.cols();
        for row in v.data_mut().chunks_mut(c) {
            softmax_in_place(row, c - 1);
        }
        self.push(v, Op::Softmax { x }, &[x])
    }

    /// `gain ⊙ x / sqrt(mean(x²) + eps)` per row.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        self.row_vector("rms_norm", x, gain)?;
        let t = self.value(x);
        let g = self.value(gain).data();
        let c = t.cols();
        let mut out = Vec::with_capacity(t.len());
        let mut inv_rms = Vec::with_capacity(t.rows());
        for row in t.data().chunks(c) {
            let ms = row.iter().map(|e| e * e).sum::<f64>() / c as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(e, gg)| e * r * gg));
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(v, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Per-row layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.row_vector("layer_norm", x, gain)?;
        self.row_vector("layer_norm", x, bias)?;
        let t = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let c = t.cols();
        let mut xhat = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in t.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std.push(s);
            xhat.extend(row.iter().map(|e| (e - mean) * s));
        }
        let out = xhat.iter().enumerate().map(|(i, h)| h * g[i % c] + b[i % c]).collect();
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Column-wise normalization using the statistics of the rows present
    /// (training-mode batch norm). Also returns the batch mean and biased variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.row_vector("batch_norm", x, gain)?;
        self.row_vector("batch_norm", x, bias)?;
        let t = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let (rows, c) = (t.rows(), t.cols());
        let mut mean = vec![0.0; c];
        for row in t.data().chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, e)| *m += e);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for row in t.data().chunks(c) {
            for j in 0..c {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, e)| (e - mean[i % c]) * inv_std[i % c])
            .collect();
        let out = xhat.iter().enumerate().map(|(i, h)| h * g[i % c] + b[i % c]).collect();
        let v = Tensor::new(t.shape().to_vec(), out)?;
        let var_out = self.push(v, Op::BatchNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]);
        Ok((var_out, mean, var))
    }

    /// `z · sigmoid(z)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * sigmoid(e));
        self.push(v, Op::Silu(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| gelu_parts(e).0);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    /// Rotary embedding on `[batch·seq × heads·head_dim]`. Row `r` sits at
    /// sequence position `offset + r % seq`; each head's coordinate pairs
    /// `(2i, 2i+1)` rotate by `pos · base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, seq: usize, heads: usize, base: f64, offset: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if heads == 0 || cols % heads != 0 {
            return Err(Error::Config(format!("{cols} columns cannot split into {heads} heads")));
        }
        let hd = cols / heads;
        if hd % 2 != 0 {
            return Err(Error::Config(format!("rotary embedding needs an even head dim, got {hd}")));
        }
        if seq == 0 || rows % seq != 0 {
            return Err(Error::dim("rope", format!("{rows} rows not a multiple of seq {seq}")));
        }
        let half = hd / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for r in 0..rows {
            let pos = (offset + r % seq) as f64;
            for i in 0..half {
                let angle = pos * base.powf(-2.0 * i as f64 / hd as f64);
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        let mut out = t.data().to_vec();
        rotate_pairs(&mut out, &cos, &sin, cols, hd, 1.0);
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(v, Op::Rope { x, cos, sin, head_dim: hd }, &[x]))
    }

    /// Scaled dot-product attention over `heads` column blocks of
    /// `[batch·seq × d]` inputs, independently per sequence of `seq` rows:
    /// `softmax(scale · Q Kᵀ + M) V`, with `M` masking keys after the query
    /// when `causal` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        causal: bool,
        scale: f64,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, d) = self.matrix_dims("attention", q)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{d} columns cannot split into {heads} heads")));
        }
        if seq == 0 || rows % seq != 0 {
            return Err(Error::dim("attention", format!("{rows} rows not a multiple of seq {seq}")));
        }
        let hd = d / heads;
        let batch = rows / seq;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm(
                    seq,
                    hd,
                    seq,
                    MatRef::block(qd, d, b * seq, h * hd),
                    MatRef::block(kd, d, b * seq, h * hd).t(),
                    p,
                    seq,
                    false,
                );
                for (i, row) in p.chunks_mut(seq).enumerate() {
                    row.iter_mut().for_each(|e| *e *= scale);
                    softmax_in_place(row, if causal { i } else { seq - 1 });
                }
                gemm_at(
                    seq,
                    seq,
                    hd,
                    MatRef::row_major(p, seq),
                    MatRef::block(vd, d, b * seq, h * hd),
                    &mut out,
                    b * seq * d + h * hd,
                    d,
                    false,
                );
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let saved = AttentionSaved {
            q,
            k,
            v,
            seq,
            heads,
            scale,
            probs,
        };
        Ok(self.push(value, Op::Attention(Box::new(saved)), &[q, k, v]))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows", format!("index {bad} out of {rows} rows")));
        }
        if ids.is_empty() {
            return Err(Error::dim("gather_rows", "no indices"));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.push(v, Op::GatherRows { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::dim("concat_rows", format!("{} vs {cols} columns", t.cols())));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / cols;
        let v = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if len == 0 || start + len > rows {
            return Err(Error::dim("slice_rows", format!("{start}+{len} of {rows} rows")));
        }
        let v = Tensor::new(vec![len, cols], t.data()[start * cols..(start + len) * cols].to_vec())?;
        Ok(self.push(v, Op::SliceRows { x, start }, &[x]))
    }

    /// Unfolds `[batch·h·w × c]` channels-last images into convolution patches
    /// `[batch·oh·ow × k·k·c]`, zero-padded.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let t = self.value(x);
        if t.len() != geom.batch * geom.height * geom.width * geom.channels {
            return Err(Error::dim("im2col", format!("{:?} vs {geom:?}", t.shape())));
        }
        if geom.height + 2 * geom.pad < geom.kernel || geom.width + 2 * geom.pad < geom.kernel || geom.stride == 0 {
            return Err(Error::dim("im2col", "kernel larger than padded input"));
        }
        let rows = geom.batch * geom.out_height() * geom.out_width();
        let mut out = vec![0.0; rows * geom.patch_len()];
        let src = t.data();
        geom.for_each_tap(|o, s| {
            if let Some(s) = s {
                out[o] = src[s];
            }
        });
        let v = Tensor::new(vec![rows, geom.patch_len()], out)?;
        Ok(self.push(v, Op::Im2Col { x, geom }, &[x]))
    }

    /// Inverted dropout with an externally drawn keep-mask (`true` = keep).
    pub fn dropout(&mut self, x: Var, keep: &[bool], p: f64) -> Result<Var> {
        let t = self.value(x);
        if keep.len() != t.len() {
            return Err(Error::dim("dropout", "mask length differs from input"));
        }
        let s = 1.0 / (1.0 - p);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let data = t.data().iter().zip(&mask).map(|(e, m)| e * m).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Dropout { x, mask }, &[x]))
    }

    /// Per-row `-ln(max(p[target], floor))` for a `[batch × m]` probability matrix.
    pub fn nll_clamped(&mut self, probs: Var, targets: &[usize], floor: f64) -> Result<Var> {
        let t = self.value(probs);
        let (rows, m) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(Error::dim("nll", format!("{} targets for {rows} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&i| i >= m) {
            return Err(Error::dim("nll", format!("target {bad} out of {m} classes")));
        }
        let out = targets
            .iter()
            .enumerate()
            .map(|(r, &c)| -t.at(r, c).max(floor).ln())
            .collect();
        let v = Tensor::new(vec![rows], out)?;
        Ok(self.push(
            v,
            Op::NllClamped {
                probs,
                targets: targets.to_vec(),
                floor,
            },
            &[probs],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// that requires them; leaves the loss does not depend on get zeros.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut out = Gradients::default();
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                out.grads.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                out.grads
                    .entry(Var(i))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn acc_add(&self, grads: &mut [Option<Vec<f64>>], v: Var, src: &[f64], factor: f64) {
        self.acc(grads, v, |dst| {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += factor * s);
        });
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let bc = tb.shape()[1];
                let n = node.value.shape()[1];
                let gr = MatRef::row_major(g, n);
                // C = A·op(B): dA = dC·op(B)ᵀ
                self.acc(grads, *a, |dst| {
                    let bm = MatRef::row_major(tb.data(), bc);
                    let opbt = if *trans_b { bm } else { bm.t() };
                    gemm(m, n, k, gr, opbt, dst, k, true);
                });
                self.acc(grads, *b, |dst| {
                    if *trans_b {
                        // B is n×k: dB = dCᵀ·A
                        gemm(n, m, k, gr.t(), MatRef::row_major(ta.data(), k), dst, k, true);
                    } else {
                        // B is k×n: dB = Aᵀ·dC
                        gemm(k, m, n, MatRef::row_major(ta.data(), k).t(), gr, dst, n, true);
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc_add(grads, *a, g, 1.0);
                self.acc_add(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_add(grads, *a, g, 1.0);
                self.acc_add(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                self.acc(grads, *a, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * db[i];
                    }
                });
                self.acc(grads, *b, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * da[i];
                    }
                });
            }
            Op::AddRow { x, bias } => {
                self.acc_add(grads, *x, g, 1.0);
                let c = node.value.cols();
                self.acc(grads, *bias, |dst| {
                    for row in g.chunks(c) {
                        dst.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::MulRow { x, gain } => {
                let c = node.value.cols();
                let (xd, gd) = (val(*x).data(), val(*gain).data());
                self.acc(grads, *x, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * gd[i % c];
                    }
                });
                self.acc(grads, *gain, |dst| {
                    for (i, (&gi, &xi)) in g.iter().zip(xd).enumerate() {
                        dst[i % c] += gi * xi;
                    }
                });
            }
            Op::Scale(x, f) => self.acc_add(grads, *x, g, *f),
            Op::Sum(x) => {
                let s = g[0];
                self.acc(grads, *x, |dst| dst.iter_mut().for_each(|d| *d += s));
            }
            Op::MeanRowGroups { x, group } => {
                let c = node.value.cols();
                let inv = 1.0 / *group as f64;
                self.acc(grads, *x, |dst| {
                    for (r, row) in dst.chunks_mut(c).enumerate() {
                        let src = &g[(r / group) * c..(r / group + 1) * c];
                        row.iter_mut().zip(src).for_each(|(d, s)| *d += s * inv);
                    }
                });
            }
            Op::Softmax { x } => {
                let c = node.value.cols();
                let y = node.value.data();
                self.acc(grads, *x, |dst| {
                    for ((drow, yrow), grow) in dst.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let c = node.value.cols();
                let (xd, gd) = (val(*x).data(), val(*gain).data());
                self.acc(grads, *x, |dst| {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let xr = &xd[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = (0..c).map(|j| gr[j] * gd[j] * xr[j]).sum();
                        let k = ir * ir * ir * dot / c as f64;
                        for j in 0..c {
                            dst[r * c + j] += ir * gd[j] * gr[j] - k * xr[j];
                        }
                    }
                });
                self.acc(grads, *gain, |dst| {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        for j in 0..c {
                            dst[j] += g[r * c + j] * xd[r * c + j] * ir;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = node.value.cols();
                let gd = val(*gain).data();
                self.acc(grads, *x, |dst| {
                    for (r, &s) in inv_std.iter().enumerate() {
                        let h = &xhat[r * c..(r + 1) * c];
                        let dh: Vec<f64> = (0..c).map(|j| g[r * c + j] * gd[j]).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dhh: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dst[r * c + j] += s / c as f64 * (c as f64 * dh[j] - sum_dh - h[j] * sum_dhh);
                        }
                    }
                });
                self.acc(grads, *gain, |dst| {
                    for (i, (&gi, &hi)) in g.iter().zip(xhat).enumerate() {
                        dst[i % c] += gi * hi;
                    }
                });
                self.acc(grads, *bias, |dst| {
                    for (i, &gi) in g.iter().enumerate() {
                        dst[i % c] += gi;
                    }
                });
            }
            Op::BatchNorm { x, gain, bias, xhat, inv_std } => {
                let c = node.value.cols();
                let rows = node.value.rows();
                let gd = val(*gain).data();
                self.acc(grads, *x, |dst| {
                    let mut sum_dh = vec![0.0; c];
                    let mut sum_dhh = vec![0.0; c];
                    for i in 0..g.len() {
                        let dh = g[i] * gd[i % c];
                        sum_dh[i % c] += dh;
                        sum_dhh[i % c] += dh * xhat[i];
                    }
                    let nf = rows as f64;
                    for i in 0..g.len() {
                        let j = i % c;
                        let dh = g[i] * gd[j];
                        dst[i] += inv_std[j] / nf * (nf * dh - sum_dh[j] - xhat[i] * sum_dhh[j]);
                    }
                });
                self.acc(grads, *gain, |dst| {
                    for (i, (&gi, &hi)) in g.iter().zip(xhat).enumerate() {
                        dst[i % c] += gi * hi;
                    }
                });
                self.acc(grads, *bias, |dst| {
                    for (i, &gi) in g.iter().enumerate() {
                        dst[i % c] += gi;
                    }
                });
            }
            Op::Silu(x) => {
                let xd = val(*x).data();
                self.acc(grads, *x, |dst| {
                    for i in 0..dst.len() {
                        let s = sigmoid(xd[i]);
                        dst[i] += g[i] * s * (1.0 + xd[i] * (1.0 - s));
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                self.acc(grads, *x, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * gelu_parts(xd[i]).1;
                    }
                });
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                self.acc(grads, *x, |dst| {
                    for i in 0..dst.len() {
                        if xd[i] > 0.0 {
                            dst[i] += g[i];
                        }
                    }
                });
            }
            Op::Rope { x, cos, sin, head_dim } => {
                let cols = node.value.cols();
                let mut back = g.to_vec();
                rotate_pairs(&mut back, cos, sin, cols, *head_dim, -1.0);
                self.acc_add(grads, *x, &back, 1.0);
            }
            Op::Attention(s) => self.backprop_attention(node, s, g, grads),
            Op::GatherRows { table, ids } => {
                let c = node.value.cols();
                self.acc(grads, *table, |dst| {
                    for (r, &id) in ids.iter().enumerate() {
                        let row = &mut dst[id * c..(id + 1) * c];
                        row.iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    self.acc_add(grads, p, &g[off..off + len], 1.0);
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                let len = node.value.len();
                self.acc(grads, *x, |dst| {
                    dst[start * c..start * c + len]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d += s);
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    self.acc(grads, p, |dst| {
                        for (r, row) in dst.chunks_mut(pc).enumerate() {
                            let src = &g[r * total + col..r * total + col + pc];
                            row.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    });
                    col += pc;
                }
            }
            Op::Im2Col { x, geom } => {
                self.acc(grads, *x, |dst| {
                    geom.for_each_tap(|o, s| {
                        if let Some(s) = s {
                            dst[s] += g[o];
                        }
                    });
                });
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * mask[i];
                    }
                });
            }
            Op::NllClamped { probs, targets, floor } => {
                let p = val(*probs);
                let m = p.cols();
                self.acc(grads, *probs, |dst| {
                    for (r, &t) in targets.iter().enumerate() {
                        let pv = p.at(r, t);
                        if pv > *floor {
                            dst[r * m + t] -= g[r] / pv;
                        }
                    }
                });
            }
        }
    }

    fn backprop_attention(
        &self,
        node: &Node,
        s: &AttentionSaved,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rows, d) = (node.value.shape()[0], node.value.shape()[1]);
        let (seq, heads) = (s.seq, s.heads);
        let hd = d / heads;
        let batch = rows / seq;
        let qd = self.nodes[s.q.0].value.data();
        let kd = self.nodes[s.k.0].value.data();
        let vd = self.nodes[s.v.0].value.data();
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let p = &s.probs[(b * heads + h) * seq * seq..][..seq * seq];
                let off = b * seq * d + h * hd;
                let go = MatRef::block(g, d, b * seq, h * hd);
                // dP = dO·Vᵀ
                gemm(seq, hd, seq, go, MatRef::block(vd, d, b * seq, h * hd).t(), &mut dp, seq, false);
                // dV += Pᵀ·dO
                gemm_at(seq, seq, hd, MatRef::row_major(p, seq).t(), go, &mut dv, off, d, true);
                for (prow, drow) in p.chunks(seq).zip(dp.chunks_mut(seq)) {
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..seq {
                        drow[j] = prow[j] * (drow[j] - dot) * s.scale;
                    }
                }
                // dQ += dL·K, dK += dLᵀ·Q
                gemm_at(
                    seq,
                    seq,
                    hd,
                    MatRef::row_major(&dp, seq),
                    MatRef::block(kd, d, b * seq, h * hd),
                    &mut dq,
                    off,
                    d,
                    true,
                );
                gemm_at(
                    seq,
                    seq,
                    hd,
                    MatRef::row_major(&dp, seq).t(),
                    MatRef::block(qd, d, b * seq, h * hd),
                    &mut dk,
                    off,
                    d,
                    true,
                );
            }
        }
        self.acc_add(grads, s.q, &dq, 1.0);
        self.acc_add(grads, s.k, &dk, 1.0);
        self.acc_add(grads, s.v, &dv, 1.0);
    }
}

fn rotate_pairs(data: &mut [f64], cos: &[f64], sin: &[f64], cols: usize, hd: usize, dir: f64) {
    let half = hd / 2;
    for (r, row) in data.chunks_mut(cols).enumerate() {
        let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
        for head in row.chunks_mut(hd) {
            for i in 0..half {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                let sn = dir * s[i];
                head[2 * i] = a * c[i] - b * sn;
                head[2 * i + 1] = a * sn + b * c[i];
            }
        }
    }
}

impl Tape {
    /// Gated feed-forward: `(swish(x·W_gate) ⊙ (x·W_up)) · W_down`.
    pub fn swiglu(&mut self, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
        let gate = self.matmul(x, w_gate)?;
        let gate = self.silu(gate);
        let up = self.matmul(x, w_up)?;
        let h = self.mul(gate, up)?;
        self.matmul(h, w_down)
    }
}
