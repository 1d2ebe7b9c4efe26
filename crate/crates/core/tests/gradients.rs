mod common;

use beampred::tensor::{ConvGeom, Tape, Tensor, RMS_EPS};
use beampred::Error;
use common::{grad_check, random, rng};

use common::PRIMITIVE_TOL;

#[test]
fn every_primitive_passes_the_oracle() {
    let checks = common::primitive_checks();
    assert!(checks.len() >= 25);
    for (name, err) in checks {
        assert!(err < PRIMITIVE_TOL, "{name}: {err}");
    }
}

#[test]
fn matmul_gradients() {
    let mut r = rng(1);
    let (a, b) = (random(&[3, 4], &mut r), random(&[4, 5], &mut r));
    assert!(grad_check(&[a.clone(), b], |t, v| t.matmul(v[0], v[1])) < PRIMITIVE_TOL);
    let bt = random(&[5, 4], &mut r);
    assert!(grad_check(&[a, bt], |t, v| t.matmul_nt(v[0], v[1])) < PRIMITIVE_TOL);
}

#[test]
fn sum_of_product_grad_is_ones_times_b_transposed() {
    let mut r = rng(2);
    let (a, b) = (random(&[2, 3], &mut r), random(&[3, 4], &mut r));
    let mut tape = Tape::new();
    let va = tape.leaf(a, true);
    let vb = tape.constant(b.clone());
    let c = tape.matmul(va, vb).unwrap();
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    let expected = Tensor::ones(&[2, 4]).matmul(&b.transpose().unwrap()).unwrap();
    assert!(g.get(va).unwrap().max_abs_diff(&expected) < 1e-12);
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(3);
    let (a, b) = (random(&[2, 3], &mut r), random(&[2, 3], &mut r));
    let row = random(&[3], &mut r);
    assert!(grad_check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1])) < PRIMITIVE_TOL);
    assert!(grad_check(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])) < PRIMITIVE_TOL);
    assert!(grad_check(&[a.clone(), b], |t, v| t.mul(v[0], v[1])) < PRIMITIVE_TOL);
    assert!(grad_check(&[a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1])) < PRIMITIVE_TOL);
    assert!(grad_check(&[a.clone(), row], |t, v| t.mul_row(v[0], v[1])) < PRIMITIVE_TOL);
    assert!(grad_check(&[a.clone()], |t, v| Ok(t.scale(v[0], -2.5))) < PRIMITIVE_TOL);
    assert!(grad_check(&[a.clone()], |t, v| Ok(t.mean(v[0]))) < PRIMITIVE_TOL);
    let tall = random(&[6, 3], &mut r);
    assert!(grad_check(&[tall], |t, v| t.mean_row_groups(v[0], 3)) < PRIMITIVE_TOL);
}

#[test]
fn activation_gradients() {
    let mut r = rng(4);
    let x = random(&[3, 5], &mut r).map(|e| 2.0 * e);
    assert!(grad_check(&[x.clone()], |t, v| Ok(t.silu(v[0]))) < PRIMITIVE_TOL);
    assert!(grad_check(&[x.clone()], |t, v| Ok(t.gelu(v[0]))) < PRIMITIVE_TOL);
    // keep away from the kink
    let away = x.map(|e| if e.abs() < 0.1 { e + 0.3 } else { e });
    assert!(grad_check(&[away], |t, v| Ok(t.relu(v[0]))) < PRIMITIVE_TOL);
}

#[test]
fn softmax_rows_values_and_gradients() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[&[0.0, 0.0, 0.0, 0.0], &[1000.0, 0.0, -3.0, 2.0]]));
    let y = tape.softmax_rows(x);
    let y = tape.value(y);
    for j in 0..4 {
        assert_eq!(y.at(0, j), 0.25);
    }
    assert!((y.at(1, 0) - 1.0).abs() < 1e-15 && y.at(1, 1) < 1e-300);
    for r in 0..2 {
        assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let x = random(&[4, 6], &mut rng(5)).map(|e| 3.0 * e);
    assert!(grad_check(&[x], |t, v| Ok(t.softmax_rows(v[0]))) < PRIMITIVE_TOL);
}

#[test]
fn rms_norm_values_and_gradients() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[2, 8]));
    let g = tape.constant(Tensor::ones(&[8]));
    let y = tape.rms_norm(x, g, RMS_EPS).unwrap();
    assert!(tape.value(y).data().iter().all(|&e| (e - 1.0).abs() < 1e-6));

    let mut r = rng(6);
    let (x, g) = (random(&[3, 8], &mut r), random(&[8], &mut r));
    assert!(grad_check(&[x, g], |t, v| t.rms_norm(v[0], v[1], RMS_EPS)) < PRIMITIVE_TOL);
}

#[test]
fn layer_and_batch_norm_gradients() {
    let mut r = rng(7);
    let (x, g, b) = (random(&[4, 6], &mut r), random(&[6], &mut r), random(&[6], &mut r));
    let inputs = [x, g, b];
    assert!(grad_check(&inputs, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)) < PRIMITIVE_TOL);
    assert!(grad_check(&inputs, |t, v| Ok(t.batch_norm(v[0], v[1], v[2], 1e-5)?.0)) < PRIMITIVE_TOL);
}

#[test]
fn swiglu_values_and_gradients() {
    let mut r = rng(8);
    let (wg, wu, wd) = (random(&[4, 6], &mut r), random(&[4, 6], &mut r), random(&[6, 4], &mut r));
    let mut tape = Tape::new();
    let x0 = tape.constant(Tensor::zeros(&[3, 4]));
    let (g, u, d) = (tape.constant(wg.clone()), tape.constant(wu.clone()), tape.constant(wd.clone()));
    let y = tape.swiglu(x0, g, u, d).unwrap();
    assert!(tape.value(y).data().iter().all(|&e| e == 0.0));
    let x = tape.constant(random(&[3, 4], &mut r));
    let zg = tape.constant(Tensor::zeros(&[4, 6]));
    let y = tape.swiglu(x, zg, u, d).unwrap();
    assert!(tape.value(y).data().iter().all(|&e| e == 0.0));

    let x = random(&[3, 4], &mut r);
    let err = grad_check(&[x, wg, wu, wd], |t, v| t.swiglu(v[0], v[1], v[2], v[3]));
    assert!(err < PRIMITIVE_TOL, "{err}");
}

#[test]
fn rope_and_attention_gradients() {
    let mut r = rng(9);
    let x = random(&[6, 8], &mut r);
    assert!(grad_check(&[x], |t, v| t.rope(v[0], 3, 2, 10_000.0, 0)) < PRIMITIVE_TOL);

    let (q, k, v) = (random(&[6, 8], &mut r), random(&[6, 8], &mut r), random(&[6, 8], &mut r));
    for causal in [false, true] {
        let err = grad_check(&[q.clone(), k.clone(), v.clone()], |t, a| {
            t.attention(a[0], a[1], a[2], 3, 2, causal, 0.5)
        });
        assert!(err < PRIMITIVE_TOL, "causal={causal}: {err}");
    }
}

#[test]
fn structural_op_gradients() {
    let mut r = rng(10);
    let table = random(&[5, 3], &mut r);
    assert!(grad_check(&[table], |t, v| t.gather_rows(v[0], &[4, 1, 1, 0])) < PRIMITIVE_TOL);
    let (a, b) = (random(&[2, 3], &mut r), random(&[4, 3], &mut r));
    assert!(grad_check(&[a.clone(), b.clone()], |t, v| t.concat_rows(&[v[1], v[0], v[1]])) < PRIMITIVE_TOL);
    assert!(grad_check(&[b.clone()], |t, v| t.slice_rows(v[0], 1, 2)) < PRIMITIVE_TOL);
    let c = random(&[2, 5], &mut r);
    assert!(grad_check(&[a, c], |t, v| t.concat_cols(&[v[0], v[1]])) < PRIMITIVE_TOL);

    let geom = ConvGeom { batch: 2, height: 5, width: 4, channels: 3, kernel: 3, stride: 2, pad: 1 };
    let img = random(&[2 * 5 * 4, 3], &mut r);
    assert!(grad_check(&[img], |t, v| t.im2col(v[0], geom)) < PRIMITIVE_TOL);

    let keep: Vec<bool> = (0..6).map(|i| i % 3 != 0).collect();
    assert!(grad_check(&[random(&[2, 3], &mut r)], |t, v| t.dropout(v[0], &keep, 0.3)) < PRIMITIVE_TOL);
}

#[test]
fn clamped_nll_gradient() {
    let mut r = rng(11);
    let logits = random(&[3, 5], &mut r);
    let err = grad_check(&[logits], |t, v| {
        let p = t.softmax_rows(v[0]);
        t.nll_clamped(p, &[0, 4, 2], 1e-12)
    });
    assert!(err < PRIMITIVE_TOL);
}

#[test]
fn simple_backward_identities() {
    let x = Tensor::from_rows(&[&[1.0, -2.0, 3.5]]);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let s = tape.sum(v);
    assert_eq!(tape.backward(s).unwrap().get(v).unwrap(), &Tensor::ones(&[1, 3]));

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    assert_eq!(tape.backward(s).unwrap().get(v).unwrap(), &x.map(|e| 2.0 * e));
}

#[test]
fn fan_out_accumulates() {
    // y = sum(3x) + sum(x ⊙ x): grad = 3 + 2x, the sum of both branch gradients
    let x = Tensor::from_rows(&[&[0.5, -1.0]]);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let a = tape.scale(v, 3.0);
    let a = tape.sum(a);
    let b = tape.mul(v, v).unwrap();
    let b = tape.sum(b);
    let y = tape.add(a, b).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(v).unwrap(), &x.map(|e| 3.0 + 2.0 * e));
}

#[test]
fn unreachable_leaf_gets_zero_grad_and_nonscalar_loss_fails() {
    let mut tape = Tape::new();
    let used = tape.leaf(Tensor::ones(&[2]), true);
    let unused = tape.leaf(Tensor::ones(&[3]), true);
    let s = tape.sum(used);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[3]));

    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::ones(&[2]), true);
    let y = tape.scale(v, 2.0);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn shape_errors() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    let w = tape.constant(Tensor::zeros(&[4, 2]));
    let u = tape.constant(Tensor::zeros(&[3, 2]));
    let d = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(tape.swiglu(a, w, u, d).is_err());
    assert!(matches!(tape.rope(a, 2, 1, 10_000.0, 0), Err(Error::Config(_))));
}
