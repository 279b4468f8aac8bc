//! Op-level contracts: hand-derived values, algebraic identities, and the
//! finite-difference suite covering every graph op.

use deft_core::{grad_check, gradcheck, Graph, GradCheckSettings, Tensor};

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= tol,
            "elem {i}: got {g}, want {w} (tol {tol})"
        );
    }
}

// ───────────────────────── softmax ─────────────────────────

#[test]
fn softmax_zero_ln2_gives_one_third_two_thirds() {
    // exp(0)=1, exp(ln 2)=2 ⇒ [1/3, 2/3].
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[2], vec![0.0, 2.0f64.ln()]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert_close(g.value(y).data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-15);
}

#[test]
fn softmax_constant_row_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[3, 5], 2.7));
    let y = g.softmax(x, 1).unwrap();
    assert_close(g.value(y).data(), &[0.2; 15], 1e-15);
}

#[test]
fn softmax_is_shift_invariant() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_fn(&[4, 6], |i| ((i * 37 % 11) as f64) * 0.3 - 1.5));
    let xs = g.add_scalar(x, 123.456);
    let y0 = g.softmax(x, 1).unwrap();
    let y1 = g.softmax(xs, 1).unwrap();
    assert_close(g.value(y1).data(), g.value(y0).data(), 1e-12);
}

#[test]
fn softmax_middle_axis_rows_sum_to_one() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_fn(&[2, 5, 3], |i| (i as f64).sin() * 2.0));
    let y = g.softmax(x, 1).unwrap();
    let d = g.value(y).data();
    for o in 0..2 {
        for inner in 0..3 {
            let s: f64 = (0..5).map(|l| d[o * 15 + l * 3 + inner]).sum();
            assert!((s - 1.0).abs() < 1e-12, "lane sum {s}");
        }
    }
}

// ───────────────────────── activations ─────────────────────────

#[test]
fn activation_point_values() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let s = g.sigmoid(x);
    assert!((g.value(s).data()[1] - 0.5).abs() < 1e-15);
    let ge = g.gelu(x);
    assert_eq!(g.value(ge).data()[1], 0.0);
    // gelu(x) → x for large x, → 0 for very negative x.
    let big = g.leaf(Tensor::new(&[2], vec![8.0, -8.0]).unwrap());
    let gb = g.gelu(big);
    assert!((g.value(gb).data()[0] - 8.0).abs() < 1e-9);
    assert!(g.value(gb).data()[1].abs() < 1e-9);
}

#[test]
fn sigmoid_saturates_without_overflow() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[2], vec![800.0, -800.0]).unwrap());
    let y = g.sigmoid(x);
    let d = g.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1] >= 0.0 && d[1] < 1e-100);
    assert!(g.value(y).all_finite());
}

// ───────────────────────── linear & layer_norm ─────────────────────────

#[test]
fn linear_identity_weight_passes_input_through() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_fn(&[2, 4], |i| i as f64 * 0.5 - 1.0));
    let w = g.leaf(Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }));
    let b = g.leaf(Tensor::zeros(&[4]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn linear_shape_rule() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[2, 3]));
    let w = g.leaf(Tensor::zeros(&[3, 4]));
    let y = g.linear(x, w, None).unwrap();
    assert_eq!(g.shape(y), &[2, 4]);
    let xt = g.leaf(Tensor::zeros(&[2, 7, 3]));
    let yt = g.linear(xt, w, None).unwrap();
    assert_eq!(g.shape(yt), &[2, 7, 4]);
}

#[test]
fn linear_inner_dim_mismatch_is_error() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[2, 3]));
    let w = g.leaf(Tensor::zeros(&[4, 5]));
    assert!(g.linear(x, w, None).is_err());
}

#[test]
fn layer_norm_standardizes_each_token() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_fn(&[3, 8], |i| ((i * 13 % 7) as f64) * 1.7 - 3.0));
    let gamma = g.leaf(Tensor::full(&[8], 1.0));
    let beta = g.leaf(Tensor::zeros(&[8]));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    let d = g.value(y).data();
    for r in 0..3 {
        let row = &d[r * 8..(r + 1) * 8];
        let m: f64 = row.iter().sum::<f64>() / 8.0;
        let v: f64 = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 8.0;
        assert!(m.abs() < 1e-12, "row mean {m}");
        // Variance lands just under 1 because of the eps floor.
        assert!((v - 1.0).abs() < 1e-4, "row var {v}");
    }
}

#[test]
fn layer_norm_constant_token_returns_beta() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[2, 4], 7.0));
    let gamma = g.leaf(Tensor::full(&[4], 3.0));
    let beta = g.leaf(Tensor::from_fn(&[4], |i| i as f64));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    let d = g.value(y).data();
    assert_close(&d[..4], &[0.0, 1.0, 2.0, 3.0], 1e-9);
    assert_close(&d[4..], &[0.0, 1.0, 2.0, 3.0], 1e-9);
}

// ───────────────────────── conv & pooling & upsample ─────────────────────────

#[test]
fn conv2d_shape_follows_floor_rule_at_224() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[1, 3, 224, 224]));
    let w = g.leaf(Tensor::zeros(&[8, 3, 3, 3]));
    let y = g.conv2d(x, w, None, 2, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 8, 112, 112]);
}

#[test]
fn conv2d_degenerate_output_is_error() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[1, 1, 2, 2]));
    let w = g.leaf(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(g.conv2d(x, w, None, 1, 0, 1).is_err());
}

#[test]
fn conv2d_channel_mismatch_is_error() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[1, 4, 8, 8]));
    let w = g.leaf(Tensor::zeros(&[2, 3, 3, 3]));
    assert!(g.conv2d(x, w, None, 1, 1, 1).is_err());
}

#[test]
fn adaptive_pool_to_same_size_is_identity() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_fn(&[1, 2, 5, 5], |i| (i as f64).cos()));
    let y = g.adaptive_avgpool2d(x, 5, 5).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn adaptive_pool_to_one_is_global_mean() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
    let y = g.adaptive_avgpool2d(x, 1, 1).unwrap();
    assert_close(g.value(y).data(), &[7.5], 1e-13);
}

#[test]
fn bilinear_upsample_reproduces_constants_and_shape() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[1, 3, 7, 7], 0.42));
    let y = g.bilinear_upsample(x, 4).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 28, 28]);
    for v in g.value(y).data() {
        assert!((v - 0.42).abs() < 1e-12);
    }
}

// ───────────────────────── layout ops ─────────────────────────

#[test]
fn seq_round_trip_is_bit_exact() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::from_fn(&[2, 5, 6, 7], |i| (i as f64 * 0.77).sin()));
    let seq = g.img2seq(x).unwrap();
    assert_eq!(g.shape(seq), &[2, 42, 5]);
    let back = g.seq2img(seq, 6, 7).unwrap();
    assert_eq!(g.value(back).data(), g.value(x).data());
}

#[test]
fn concat_token_sets_along_token_axis() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::from_fn(&[1, 4, 3], |i| i as f64));
    let b = g.leaf(Tensor::from_fn(&[1, 4, 3], |i| 100.0 + i as f64));
    let y = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(y), &[1, 8, 3]);
    let d = g.value(y).data();
    assert_eq!(&d[..12], g.value(a).data());
    assert_eq!(&d[12..], g.value(b).data());
}

#[test]
fn concat_mismatched_non_axis_dim_is_error() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(&[1, 4, 3]));
    let b = g.leaf(Tensor::zeros(&[1, 4, 5]));
    assert!(g.concat(&[a, b], 1).is_err());
}

#[test]
fn permute_matches_manual_transpose() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
    let y = g.permute(x, &[1, 0]).unwrap();
    assert_eq!(g.shape(y), &[3, 2]);
    assert_eq!(g.value(y).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
}

// ───────────────────────── backward basics ─────────────────────────

#[test]
fn grad_of_sum_is_ones_and_half_square_is_x() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_fn(&[6], |i| i as f64 - 2.5).requires_grad(true));
    let l = g.sum(x);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_fn(&[6], |i| i as f64 - 2.5).requires_grad(true));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let l = g.mul_scalar(s, 0.5);
    g.backward(l).unwrap();
    let want: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
    assert_eq!(g.grad(x).unwrap(), want.as_slice());
}

#[test]
fn concat_backward_routes_slices_to_inputs() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(&[2, 2]).requires_grad(true));
    let b = g.leaf(Tensor::zeros(&[2, 3]).requires_grad(true));
    let y = g.concat(&[a, b], 1).unwrap();
    let w = g.constant(Tensor::from_fn(&[2, 5], |i| i as f64));
    let p = g.mul(y, w).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    // Upstream grad is the weight tensor itself; each input gets its block.
    assert_eq!(g.grad(a).unwrap(), &[0.0, 1.0, 5.0, 6.0]);
    assert_eq!(g.grad(b).unwrap(), &[2.0, 3.0, 4.0, 7.0, 8.0, 9.0]);
}

// ───────────────────────── finite-difference suite ─────────────────────────

#[test]
fn every_op_passes_gradient_check() {
    let reports = gradcheck::op_suite(false).unwrap();
    assert!(reports.len() >= 27, "suite shrank to {} ops", reports.len());
    for r in &reports {
        assert!(
            r.pass(),
            "{}: max rel err {:.3e} over {} probes (tol {:.0e})",
            r.name,
            r.max_rel_err,
            r.checked,
            r.tolerance
        );
    }
}

#[test]
fn corrupted_suite_reports_failures() {
    // Negative control: with one gradient entry perturbed, checks must fail.
    let reports = gradcheck::op_suite(true).unwrap();
    assert!(reports.iter().any(|r| !r.pass()));
}

#[test]
fn conv_gradient_spot_check_tighter_than_suite() {
    let x = Tensor::from_fn(&[1, 2, 4, 4], |i| ((i * 29 % 13) as f64) * 0.1 - 0.6)
        .requires_grad(true);
    let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 17 % 11) as f64) * 0.05 - 0.25)
        .requires_grad(true);
    let rep = grad_check(
        "conv_spot",
        &[x, w],
        &GradCheckSettings::exhaustive(1e-6),
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], None, 1, 1, 1)?;
            Ok(g.sum(y))
        },
    )
    .unwrap();
    assert!(rep.pass(), "max rel err {}", rep.max_rel_err);
}
