#![allow(dead_code)]

use beampred::tensor::{Tape, Tensor, Var};
use beampred::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error bound for the primitive checks.
pub const PRIMITIVE_TOL: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Elementwise error of an analytic gradient against a central-difference
/// estimate, relative to `max(|a|, |n|, 1e-3)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Reduces an arbitrary output to a scalar with fixed pseudo-random weights so
/// every output element contributes a distinct sensitivity.
fn weighted_sum(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let shape = tape.value(out).shape().to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i as f64) * 0.754_877_666).fract() - 0.37);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Central-difference oracle: compares tape gradients of `f` for every input
/// element and returns the worst relative error.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars).unwrap();
        let loss = weighted_sum(&mut tape, out).unwrap();
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = weighted_sum(&mut tape, out).unwrap();
    let grads = tape.backward(loss).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("leaf gradient");
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Worst central-difference error of every differentiable tape primitive,
/// one entry per primitive.
pub fn primitive_checks() -> Vec<(&'static str, f64)> {
    use beampred::tensor::{ConvGeom, RMS_EPS};
    let mut r = rng(42);
    let mut out = Vec::new();
    let (a, b) = (random(&[3, 4], &mut r), random(&[4, 5], &mut r));
    out.push(("matmul", grad_check(&[a.clone(), b], |t, v| t.matmul(v[0], v[1]))));
    let bt = random(&[5, 4], &mut r);
    out.push(("matmul_nt", grad_check(&[a, bt], |t, v| t.matmul_nt(v[0], v[1]))));
    let (x, y) = (random(&[2, 3], &mut r), random(&[2, 3], &mut r));
    let row = random(&[3], &mut r);
    out.push(("add", grad_check(&[x.clone(), y.clone()], |t, v| t.add(v[0], v[1]))));
    out.push(("sub", grad_check(&[x.clone(), y.clone()], |t, v| t.sub(v[0], v[1]))));
    out.push(("mul", grad_check(&[x.clone(), y], |t, v| t.mul(v[0], v[1]))));
    out.push(("add_row", grad_check(&[x.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]))));
    out.push(("mul_row", grad_check(&[x.clone(), row], |t, v| t.mul_row(v[0], v[1]))));
    out.push(("scale", grad_check(&[x.clone()], |t, v| Ok(t.scale(v[0], -2.5)))));
    out.push(("sum", grad_check(&[x.clone()], |t, v| Ok(t.sum(v[0])))));
    out.push(("mean", grad_check(&[x.clone()], |t, v| Ok(t.mean(v[0])))));
    out.push(("mean_row_groups", grad_check(&[random(&[6, 3], &mut r)], |t, v| t.mean_row_groups(v[0], 3))));
    let act = random(&[3, 5], &mut r).map(|e| 2.0 * e);
    out.push(("silu", grad_check(&[act.clone()], |t, v| Ok(t.silu(v[0])))));
    out.push(("gelu", grad_check(&[act.clone()], |t, v| Ok(t.gelu(v[0])))));
    let away = act.map(|e| if e.abs() < 0.1 { e + 0.3 } else { e });
    out.push(("relu", grad_check(&[away], |t, v| Ok(t.relu(v[0])))));
    out.push(("softmax_rows", grad_check(&[random(&[4, 6], &mut r).map(|e| 3.0 * e)], |t, v| Ok(t.softmax_rows(v[0])))));
    let (nx, ng, nb) = (random(&[4, 8], &mut r), random(&[8], &mut r), random(&[8], &mut r));
    out.push(("rms_norm", grad_check(&[nx.clone(), ng.clone()], |t, v| t.rms_norm(v[0], v[1], RMS_EPS))));
    let norm_in = [nx, ng, nb];
    out.push(("layer_norm", grad_check(&norm_in, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))));
    out.push(("batch_norm", grad_check(&norm_in, |t, v| Ok(t.batch_norm(v[0], v[1], v[2], 1e-5)?.0))));
    let sw = [random(&[3, 4], &mut r), random(&[4, 6], &mut r), random(&[4, 6], &mut r), random(&[6, 4], &mut r)];
    out.push(("swiglu", grad_check(&sw, |t, v| t.swiglu(v[0], v[1], v[2], v[3]))));
    out.push(("rope", grad_check(&[random(&[6, 8], &mut r)], |t, v| t.rope(v[0], 3, 2, 10_000.0, 1))));
    let qkv = [random(&[6, 8], &mut r), random(&[6, 8], &mut r), random(&[6, 8], &mut r)];
    out.push(("attention", grad_check(&qkv, |t, a| t.attention(a[0], a[1], a[2], 3, 2, false, 0.5))));
    out.push(("attention_causal", grad_check(&qkv, |t, a| t.attention(a[0], a[1], a[2], 3, 2, true, 0.5))));
    out.push(("gather_rows", grad_check(&[random(&[5, 3], &mut r)], |t, v| t.gather_rows(v[0], &[4, 1, 1, 0]))));
    let (p, q) = (random(&[2, 3], &mut r), random(&[4, 3], &mut r));
    out.push(("concat_rows", grad_check(&[p.clone(), q.clone()], |t, v| t.concat_rows(&[v[1], v[0], v[1]]))));
    out.push(("slice_rows", grad_check(&[q], |t, v| t.slice_rows(v[0], 1, 2))));
    out.push(("concat_cols", grad_check(&[p, random(&[2, 5], &mut r)], |t, v| t.concat_cols(&[v[0], v[1]]))));
    let geom = ConvGeom { batch: 2, height: 5, width: 4, channels: 3, kernel: 3, stride: 2, pad: 1 };
    out.push(("im2col", grad_check(&[random(&[40, 3], &mut r)], |t, v| t.im2col(v[0], geom))));
    let keep: Vec<bool> = (0..6).map(|i| i % 3 != 0).collect();
    out.push(("dropout", grad_check(&[random(&[2, 3], &mut r)], |t, v| t.dropout(v[0], &keep, 0.3))));
    out.push((
        "nll_clamped",
        grad_check(&[random(&[3, 5], &mut r)], |t, v| {
            let p = t.softmax_rows(v[0]);
            t.nll_clamped(p, &[0, 4, 2], 1e-12)
        }),
    ));
    out
}

/// Central-difference check of the full multimodal model (d_m = 16, two
/// encoder and two decoder blocks) on up to `want` sampled parameters with
/// nonzero gradient. Returns the number checked and the worst relative error.
pub fn toy_model_gradcheck(want: usize) -> (usize, f64) {
    use beampred::model::{Batch, DataSpec, MlmModel, ModelConfig};
    use beampred::train::PROB_FLOOR;

    let spec = DataSpec { n_views: 2, height: 8, width: 8, n_beams: 8, extent: [200.0, 200.0, 10.0] };
    let cfg = ModelConfig {
        d_m: 16,
        d_v: 16,
        n_heads: 2,
        n_encoder_blocks: 2,
        n_decoder_blocks: 2,
        lora_rank: 4,
        patch_size: 4,
        ..Default::default()
    };
    let mut m = MlmModel::new(cfg, spec.clone(), 12).unwrap();
    let mut r = rng(4);
    // nonzero adapters so gradients reach A as well
    let names: Vec<String> = m.params.iter().filter(|p| p.name.ends_with(".lora_b")).map(|p| p.name.clone()).collect();
    for n in names {
        let shape = m.params.get(&n).unwrap().shape().to_vec();
        m.params.set_value(&n, random(&shape, &mut r)).unwrap();
    }
    let batch = Batch {
        images: random(&[2, spec.pixels()], &mut r),
        positions: vec![[12.5, 130.0, 1.5], [180.25, 40.75, 1.5]],
        labels: vec![3, 6],
    };
    let loss_of = |m: &MlmModel| {
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, false);
        let p = m.forward(&mut tape, &bound, &batch).unwrap();
        let nll = tape.nll_clamped(p, &batch.labels, PROB_FLOOR).unwrap();
        let l = tape.sum(nll);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let bound = m.params.bind(&mut tape, true);
    let p = m.forward(&mut tape, &bound, &batch).unwrap();
    let nll = tape.nll_clamped(p, &batch.labels, PROB_FLOOR).unwrap();
    let l = tape.sum(nll);
    let mut grads = tape.backward(l).unwrap();
    let mut g = m.clone();
    g.params.absorb(&bound, &mut grads);

    let names: Vec<String> = m.params.iter().map(|p| p.name.clone()).collect();
    let (mut checked, mut worst) = (0, 0.0f64);
    for attempt in 0..20 * want {
        let name = &names[attempt % names.len()];
        let n = m.params.get(name).unwrap().len();
        let j = r.random_range(0..n);
        let analytic = g.params.param(name).unwrap().grad.as_ref().unwrap().data()[j];
        if analytic.abs() < 1e-7 {
            continue;
        }
        let h = 1e-5;
        let mut probe = m.clone();
        let mut t = probe.params.get(name).unwrap().clone();
        t.data_mut()[j] += h;
        probe.params.set_value(name, t.clone()).unwrap();
        let lp = loss_of(&probe);
        t.data_mut()[j] -= 2.0 * h;
        probe.params.set_value(name, t).unwrap();
        let lm = loss_of(&probe);
        let numeric = (lp - lm) / (2.0 * h);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
        checked += 1;
        if checked >= want {
            break;
        }
    }
    (checked, worst)
}
