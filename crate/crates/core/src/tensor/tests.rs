use super::*;
use crate::error::TensorError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_EPS: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect()
}

#[test]
fn sum_of_squares_gradient_is_two_x() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
    let sq = g.mul(x, x).unwrap();
    let root = g.sum_all(sq).unwrap();
    assert_eq!(g.value_scalar(root), 14.0);
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    let err = finite_diff_check(&mut g, root, &[x], FD_EPS).unwrap();
    assert!(err < FD_TOL, "rel err {err}");
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[1, 3], vec![0.0; 3], true).unwrap();
    let s = g.softmax_rows(x).unwrap();
    for &v in g.values(s) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_survive_huge_logits() {
    let mut g = Graph::<f64>::new();
    let x = g
        .leaf(&[2, 3], vec![1000.0, 999.0, -1000.0, 3.0, 3.0, 3.0], true)
        .unwrap();
    let s = g.softmax_rows(x).unwrap();
    let v = g.values(s);
    assert!(v.iter().all(|x| x.is_finite()));
    for r in 0..2 {
        let sum: f64 = v[r * 3..(r + 1) * 3].iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[3, 4], rand_vec(&mut rng, 12), true).unwrap();
    let w = g.constant(&[3, 4], rand_vec(&mut rng, 12)).unwrap();
    let s = g.softmax_rows(x).unwrap();
    let m = g.mul(s, w).unwrap();
    let root = g.sum_all(m).unwrap();
    let err = finite_diff_check(&mut g, root, &[x], FD_EPS).unwrap();
    assert!(err < FD_TOL, "rel err {err}");
}

#[test]
fn mean_gradient_is_inverse_count() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[4], vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
    let root = g.mean_all(x).unwrap();
    assert_eq!(g.value_scalar(root), 2.5);
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);
}

#[test]
fn gradients_are_linear_in_the_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vals = rand_vec(&mut rng, 6);

    let grad_f = |vals: &[f64]| {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[6], vals.to_vec(), true).unwrap();
        let e = g.exp(x).unwrap();
        let root = g.sum_all(e).unwrap();
        g.backward(root).unwrap();
        g.grad(x).unwrap().to_vec()
    };
    let grad_h = |vals: &[f64]| {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[6], vals.to_vec(), true).unwrap();
        let m = g.mul(x, x).unwrap();
        let root = g.sum_all(m).unwrap();
        g.backward(root).unwrap();
        g.grad(x).unwrap().to_vec()
    };

    // combined root 2f + 3h on one graph
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[6], vals.clone(), true).unwrap();
    let e = g.exp(x).unwrap();
    let f = g.sum_all(e).unwrap();
    let m = g.mul(x, x).unwrap();
    let h = g.sum_all(m).unwrap();
    let f2 = g.mul_scalar(f, 2.0).unwrap();
    let h3 = g.mul_scalar(h, 3.0).unwrap();
    let root = g.add(f2, h3).unwrap();
    g.backward(root).unwrap();
    let combined = g.grad(x).unwrap();

    let (gf, gh) = (grad_f(&vals), grad_h(&vals));
    for i in 0..6 {
        assert!((combined[i] - (2.0 * gf[i] + 3.0 * gh[i])).abs() < 1e-12);
    }
}

#[test]
fn constant_root_yields_zero_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
    let s = g.sum_all(x).unwrap();
    let root = g.mul_scalar(s, 0.0).unwrap();
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0; 3]);

    // a leaf never wired to the root gets no gradient at all
    let lonely = g.leaf(&[2], vec![5.0, 6.0], true).unwrap();
    g.backward(root).unwrap();
    assert!(g.grad(lonely).is_none());
    assert_eq!(g.grad_or_zeros(lonely), vec![0.0, 0.0]);
}

#[test]
fn detach_blocks_gradients_but_keeps_values() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[3], vec![0.5, -1.0, 2.0], true).unwrap();
    let d = g.detach(x).unwrap();
    assert_eq!(g.values(d), g.values(x));
    let m = g.mul(d, x).unwrap();
    let root = g.sum_all(m).unwrap();
    g.backward(root).unwrap();
    // d is treated as a constant, so droot/dx is exactly the snapshot
    assert_eq!(g.grad(x).unwrap(), &[0.5, -1.0, 2.0]);
    // and the checker agrees because replay keeps the snapshot pinned
    let err = finite_diff_check(&mut g, root, &[x], FD_EPS).unwrap();
    assert!(err < FD_TOL, "rel err {err}");
}

#[test]
fn repeated_backward_is_bitwise_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[4, 4], rand_vec(&mut rng, 16), true).unwrap();
    let s = g.softmax_rows(x).unwrap();
    let l = g.log_eps(s).unwrap();
    let root = g.mean_all(l).unwrap();
    g.backward(root).unwrap();
    let first = g.grad(x).unwrap().to_vec();
    g.backward(root).unwrap();
    assert_eq!(first, g.grad(x).unwrap());
}

// ── arithmetic and scalar ops ───────────────────────────────────────────

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::<f64>::new();
    let a = g.leaf(&[5], rand_vec(&mut rng, 5), true).unwrap();
    // keep b away from zero so div stays in its domain under perturbation
    let bv: Vec<f64> = rand_vec(&mut rng, 5)
        .into_iter()
        .map(|v| v.signum() * (v.abs() + 0.5))
        .collect();
    let b = g.leaf(&[5], bv, true).unwrap();
    let s = g.add(a, b).unwrap();
    let d = g.sub(s, a).unwrap();
    let m = g.mul(d, a).unwrap();
    let q = g.div(m, b).unwrap();
    let n = g.neg(q).unwrap();
    let p1 = g.add_scalar(n, 1.5).unwrap();
    let p2 = g.mul_scalar(p1, -0.25).unwrap();
    let p3 = g.div_scalar(p2, 2.0).unwrap();
    let root = g.sum_all(p3).unwrap();
    let err = finite_diff_check(&mut g, root, &[a, b], FD_EPS).unwrap();
    assert!(err < FD_TOL, "rel err {err}");
}

#[test]
fn div_scalar_by_itself_is_exactly_one() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[1], vec![10.0], true).unwrap();
    let y = g.div_scalar(x, 10.0).unwrap();
    assert_eq!(g.values(y), &[1.0]);
}

#[test]
fn tanh_is_bounded_and_differentiable() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[4], vec![-800.0, -0.5, 0.0, 800.0], true).unwrap();
    let t = g.tanh(x).unwrap();
    let v = g.values(t);
    assert_eq!(v[0], -1.0);
    assert_eq!(v[2], 0.0);
    assert_eq!(v[3], 1.0);
    assert!((v[1] - (-0.5f64).tanh()).abs() < 1e-15);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[3], vec![-1.2, 0.3, 0.9], true).unwrap();
    let t = g.tanh(x).unwrap();
    let sq = g.mul(t, t).unwrap();
    let root = g.sum_all(sq).unwrap();
    let err = finite_diff_check(&mut g, root, &[x], FD_EPS).unwrap();
    assert!(err < FD_TOL, "rel err {err}");
}

#[test]
fn exp_log_pow_gradients_match_finite_differences() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[4], vec![0.3, 1.1, 2.4, 0.07], true).unwrap();
    let e = g.exp(x).unwrap();
    let l = g.log_eps(e).unwrap();
    let p = g.pow(l, 2.5).unwrap();
    let root = g.sum_all(p).unwrap();
    let err = finite_diff_check(&mut g, root, &[x], FD_EPS).unwrap();
    assert!(err < FD_TOL, "rel err {err}");
}

#[test]
fn domain_violations_are_reported() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(&[2], vec![1.0, 2.0], false).unwrap();
    let z = g.constant(&[2], vec![1.0, 0.0]).unwrap();
    assert!(matches!(g.div(a, z), Err(TensorError::Domain { .. })));
    assert!(matches!(
        g.div_scalar(a, 0.0),
        Err(TensorError::Domain { .. })
    ));

    let neg = g.constant(&[1], vec![-0.5]).unwrap();
    assert!(matches!(g.log_eps(neg), Err(TensorError::Domain { .. })));
    assert!(matches!(g.pow(neg, 0.5), Err(TensorError::Domain { .. })));

    let zero = g.constant(&[1], vec![0.0]).unwrap();
    assert!(matches!(g.pow(zero, 0.5), Err(TensorError::Domain { .. })));
    assert!(g.pow(zero, 2.0).is_ok());
}

#[test]
fn non_finite_results_are_reported() {
    let mut g = Graph::<f64>::new();
    let big = g.constant(&[1], vec![1e308]).unwrap();
    assert!(matches!(g.exp(big), Err(TensorError::NonFinite { .. })));
    let tiny = g.constant(&[1], vec![1e-308]).unwrap();
    assert!(matches!(
        g.div(big, tiny),
        Err(TensorError::NonFinite { .. })
    ));
    assert!(matches!(
        g.leaf(&[1], vec![f64::NAN], false),
        Err(TensorError::NonFinite { .. })
    ));
}

#[test]
fn shape_mismatches_are_reported() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(&[2, 3], vec![0.0; 6], false).unwrap();
    let b = g.leaf(&[3, 2], vec![0.0; 6], false).unwrap();
    assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    assert!(matches!(
        g.matmul(a, a),
        Err(TensorError::ShapeMismatch { .. })
    ));
    assert!(g.matmul(a, b).is_ok());
    assert!(matches!(
        g.reshape(a, &[4, 2]),
        Err(TensorError::InvalidArg { .. })
    ));
}

#[test]
fn backward_rejects_non_scalar_roots() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(&[2, 2], vec![1.0; 4], true).unwrap();
    assert!(matches!(
        g.backward(a),
        Err(TensorError::NonScalarRoot { .. })
    ));
}

// ── reductions ──────────────────────────────────────────────────────────

#[test]
fn sum_axis_works_on_rank_three() {
    let mut g = Graph::<f64>::new();
    // shape [2, 2, 3], values 0..11
    let x = g
        .leaf(&[2, 2, 3], (0..12).map(f64::from).collect(), true)
        .unwrap();
    let s1 = g.sum_axis(x, 1).unwrap();
    assert_eq!(g.shape(s1), &[2, 3]);
    assert_eq!(g.values(s1), &[3.0, 5.0, 7.0, 15.0, 17.0, 19.0]);
    let s0 = g.sum_axis(x, 0).unwrap();
    assert_eq!(g.values(s0), &[6.0, 8.0, 10.0, 12.0, 14.0, 16.0]);
    let s2 = g.sum_axis(x, 2).unwrap();
    assert_eq!(g.values(s2), &[3.0, 12.0, 21.0, 30.0]);

    let t = g.sum_all(s1).unwrap();
    g.backward(t).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 12]);
}

#[test]
fn max_axis_breaks_ties_toward_lowest_index() {
    let mut g = Graph::<f64>::new();
    let x = g
        .leaf(&[2, 3], vec![5.0, 5.0, 1.0, 0.0, 2.0, 2.0], true)
        .unwrap();
    let (m, idx) = g.max_axis(x, 1).unwrap();
    assert_eq!(g.values(m), &[5.0, 2.0]);
    assert_eq!(idx, vec![0, 1]);
    let root = g.sum_all(m).unwrap();
    g.backward(root).unwrap();
    // gradient goes only to the recorded winners
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn max_axis_gradient_matches_finite_differences_off_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[3, 5], rand_vec(&mut rng, 15), true).unwrap();
    let (m, _) = g.max_axis(x, 1).unwrap();
    let root = g.sum_all(m).unwrap();
    let err = finite_diff_check(&mut g, root, &[x], FD_EPS).unwrap();
    assert!(err < FD_TOL, "rel err {err}");
}

// ── linear algebra ──────────────────────────────────────────────────────

#[test]
fn matmul_matches_hand_computation() {
    let mut g = Graph::<f64>::new();
    let a = g
        .leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true)
        .unwrap();
    let b = g
        .leaf(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0], true)
        .unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.values(c), &[58.0, 64.0, 139.0, 154.0]);
    let root = g.sum_all(c).unwrap();
    let err = finite_diff_check(&mut g, root, &[a, b], FD_EPS).unwrap();
    assert!(err < FD_TOL, "rel err {err}");
}

#[test]
fn transpose_round_trips_and_backpropagates() {
    let mut g = Graph::<f64>::new();
    let a = g
        .leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true)
        .unwrap();
    let t = g.transpose(a).unwrap();
    assert_eq!(g.shape(t), &[3, 2]);
    assert_eq!(g.values(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    let tt = g.transpose(t).unwrap();
    assert_eq!(g.values(tt), g.values(a));

    let w = g.constant(&[3, 2], vec![1.0, 10.0, 100.0, 1000.0, 2.0, 20.0]).unwrap();
    let m = g.mul(t, w).unwrap();
    let root = g.sum_all(m).unwrap();
    g.backward(root).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[1.0, 100.0, 2.0, 10.0, 1000.0, 20.0]);
}

// ── convolution ─────────────────────────────────────────────────────────

#[test]
fn conv2d_identity_kernel_reproduces_input() {
    let mut g = Graph::<f64>::new();
    let x = g
        .leaf(&[1, 3, 3], (1..=9).map(f64::from).collect(), true)
        .unwrap();
    // 3x3 kernel with 1 in the center
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let w = g.leaf(&[1, 1, 3, 3], k, true).unwrap();
    let y = g.conv2d(x, w, None, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 3]);
    assert_eq!(g.values(y), g.values(x));
}

#[test]
fn conv2d_shapes_and_zero_padding() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[1, 2, 2], vec![1.0; 4], false).unwrap();
    let w = g.leaf(&[1, 1, 3, 3], vec![1.0; 9], false).unwrap();
    let y = g.conv2d(x, w, None, 1).unwrap();
    // corners see a 2x2 window of ones
    assert_eq!(g.values(y), &[4.0; 4]);

    let x2 = g.leaf(&[1, 5, 5], vec![1.0; 25], false).unwrap();
    let y2 = g.conv2d(x2, w, None, 2).unwrap();
    assert_eq!(g.shape(y2), &[1, 3, 3]);

    let x3 = g.leaf(&[1, 4, 4], vec![1.0; 16], false).unwrap();
    let y3 = g.conv2d(x3, w, None, 2).unwrap();
    assert_eq!(g.shape(y3), &[1, 2, 2]);
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    for stride in [1usize, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(17 + stride as u64);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[2, 4, 4], rand_vec(&mut rng, 32), true).unwrap();
        let w = g.leaf(&[3, 2, 3, 3], rand_vec(&mut rng, 54), true).unwrap();
        let b = g.leaf(&[3], rand_vec(&mut rng, 3), true).unwrap();
        let y = g.conv2d(x, w, Some(b), stride).unwrap();
        let sq = g.mul(y, y).unwrap();
        let root = g.sum_all(sq).unwrap();
        let err = finite_diff_check(&mut g, root, &[x, w, b], FD_EPS).unwrap();
        assert!(err < FD_TOL, "stride {stride} rel err {err}");
    }
}

#[test]
fn conv2d_one_by_one_kernel_acts_per_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[2, 3, 3], rand_vec(&mut rng, 18), true).unwrap();
    let w = g.leaf(&[1, 2, 1, 1], vec![2.0, -1.0], true).unwrap();
    let y = g.conv2d(x, w, None, 1).unwrap();
    let xv = g.values(x).to_vec();
    for i in 0..9 {
        let want = 2.0 * xv[i] - xv[9 + i];
        assert!((g.values(y)[i] - want).abs() < 1e-12);
    }
    let root = g.sum_all(y).unwrap();
    let err = finite_diff_check(&mut g, root, &[x, w], FD_EPS).unwrap();
    assert!(err < FD_TOL, "rel err {err}");
}

// ── structured matrix ops ───────────────────────────────────────────────

#[test]
fn l2_norm_cols_guards_zero_columns() {
    let mut g = Graph::<f64>::new();
    let x = g
        .leaf(&[2, 3], vec![3.0, 0.0, 1.0, 4.0, 0.0, 0.0], true)
        .unwrap();
    let n = g.l2_norm_cols(x).unwrap();
    let v = g.values(n);
    assert!((v[0] - 5.0).abs() < 1e-12);
    assert_eq!(v[1], f64::GUARD_EPS); // zero column floors at the guard
    assert!((v[2] - 1.0).abs() < 1e-12);

    let root = g.sum_all(n).unwrap();
    g.backward(root).unwrap();
    let gx = g.grad(x).unwrap();
    assert!((gx[0] - 0.6).abs() < 1e-12);
    assert_eq!(gx[1], 0.0); // clamped column passes no gradient
}

#[test]
fn l2_norm_cols_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut g = Graph::<f64>::new();
    let vals: Vec<f64> = rand_vec(&mut rng, 12)
        .into_iter()
        .map(|v| v + 3.0) // keep norms comfortably away from zero
        .collect();
    let x = g.leaf(&[3, 4], vals, true).unwrap();
    let n = g.l2_norm_cols(x).unwrap();
    let sq = g.mul(n, n).unwrap();
    let root = g.sum_all(sq).unwrap();
    let err = finite_diff_check(&mut g, root, &[x], FD_EPS).unwrap();
    assert!(err < FD_TOL, "rel err {err}");
}

#[test]
fn cols_div_and_rows_sub_oracles() {
    let mut g = Graph::<f64>::new();
    let x = g
        .leaf(&[2, 3], vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0], true)
        .unwrap();
    let v = g.leaf(&[3], vec![2.0, 4.0, 6.0], true).unwrap();
    let d = g.cols_div(x, v).unwrap();
    assert_eq!(g.values(d), &[1.0, 1.0, 1.0, 4.0, 2.5, 2.0]);

    let r = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
    let s = g.rows_sub(d, r).unwrap();
    assert_eq!(g.values(s), &[0.0, 0.0, 0.0, 2.0, 0.5, 0.0]);

    let sq = g.mul(s, s).unwrap();
    let root = g.sum_all(sq).unwrap();
    let err = finite_diff_check(&mut g, root, &[x, v, r], FD_EPS).unwrap();
    assert!(err < FD_TOL, "rel err {err}");
}

#[test]
fn concat_joins_along_either_axis() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(&[1, 2], vec![1.0, 2.0], true).unwrap();
    let b = g.leaf(&[1, 2], vec![3.0, 4.0], true).unwrap();
    let rows = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.shape(rows), &[2, 2]);
    assert_eq!(g.values(rows), &[1.0, 2.0, 3.0, 4.0]);
    let cols = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(cols), &[1, 4]);
    assert_eq!(g.values(cols), &[1.0, 2.0, 3.0, 4.0]);

    let w = g.constant(&[1, 4], vec![1.0, 10.0, 100.0, 1000.0]).unwrap();
    let m = g.mul(cols, w).unwrap();
    let root = g.sum_all(m).unwrap();
    g.backward(root).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[1.0, 10.0]);
    assert_eq!(g.grad(b).unwrap(), &[100.0, 1000.0]);
}

#[test]
fn gather_rows_selects_and_scatters() {
    let mut g = Graph::<f64>::new();
    let x = g
        .leaf(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true)
        .unwrap();
    let sel = g.gather_rows(x, &[2, 0, 2]).unwrap();
    assert_eq!(g.values(sel), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    let root = g.sum_all(sel).unwrap();
    g.backward(root).unwrap();
    // row 2 was taken twice
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

    assert!(g.gather_rows(x, &[3]).is_err());
}

#[test]
fn gather_entries_accumulates_duplicates() {
    let mut g = Graph::<f64>::new();
    let x = g
        .leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true)
        .unwrap();
    let e = g.gather_entries(x, &[(0, 1), (1, 2), (0, 1)]).unwrap();
    assert_eq!(g.values(e), &[2.0, 6.0, 2.0]);
    let root = g.sum_all(e).unwrap();
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 2.0, 0.0, 0.0, 0.0, 1.0]);

    assert!(g.gather_entries(x, &[(2, 0)]).is_err());
    assert!(g.gather_entries(x, &[]).is_err());
}

// ── contrast normalization ──────────────────────────────────────────────

#[test]
fn contrast_norm_standardizes_rows_exactly() {
    let mut g = Graph::<f64>::new();
    let x = g
        .leaf(&[2, 3], vec![1.0, 2.0, 3.0, 10.0, 10.0, 10.0], true)
        .unwrap();
    let c = g.contrast_norm_rows(x).unwrap();
    let v = g.values(c);
    // sample std of [1,2,3] is exactly 1
    assert_eq!(&v[..3], &[-1.0, 0.0, 1.0]);
    // constant row is degenerate -> zeros
    assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);

    let root = g.sum_all(c).unwrap();
    g.backward(root).unwrap();
    let gx = g.grad(x).unwrap();
    // non-degenerate row: g * 1/sigma with sigma == 1; degenerate row: zero
    assert_eq!(gx, &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn contrast_norm_single_column_is_degenerate() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[2, 1], vec![7.0, -3.0], true).unwrap();
    let c = g.contrast_norm_rows(x).unwrap();
    assert_eq!(g.values(c), &[0.0, 0.0]);
    let root = g.sum_all(c).unwrap();
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn contrast_norm_gradient_matches_finite_differences() {
    // The statistics are frozen at build time, so the checker sees the same
    // fixed affine map that backward differentiates.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[3, 5], rand_vec(&mut rng, 15), true).unwrap();
    let c = g.contrast_norm_rows(x).unwrap();
    let w = g.constant(&[3, 5], rand_vec(&mut rng, 15)).unwrap();
    let m = g.mul(c, w).unwrap();
    let root = g.sum_all(m).unwrap();
    let err = finite_diff_check(&mut g, root, &[x], FD_EPS).unwrap();
    assert!(err < FD_TOL, "rel err {err}");
}

// ── checker ─────────────────────────────────────────────────────────────

#[test]
fn checker_rejects_bad_arguments() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
    let y = g.mul(x, x).unwrap();
    let root = g.sum_all(y).unwrap();
    assert!(finite_diff_check(&mut g, root, &[y], FD_EPS).is_err());
    assert!(finite_diff_check(&mut g, root, &[x], 0.0).is_err());
    assert!(finite_diff_check(&mut g, y, &[x], FD_EPS).is_err()); // non-scalar root
}

#[test]
fn checker_restores_the_graph() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
    let e = g.exp(x).unwrap();
    let root = g.sum_all(e).unwrap();
    let before = (g.values(e).to_vec(), g.value_scalar(root));
    finite_diff_check(&mut g, root, &[x], FD_EPS).unwrap();
    assert_eq!(g.values(x), &[1.0, 2.0, 3.0]);
    assert_eq!(g.values(e), before.0);
    assert_eq!(g.value_scalar(root), before.1);
}

#[test]
fn corrupted_gradients_are_detected() {
    // Sensitivity check for the comparison itself: nudge one analytic entry
    // and the reported error must blow past the acceptance threshold.
    let analytic = vec![2.0, 4.0, 6.0];
    let mut corrupted = analytic.clone();
    corrupted[1] += 0.5;
    let numeric = vec![2.0 + 1e-9, 4.0 - 1e-9, 6.0];
    assert!(max_relative_error(&analytic, &numeric) < 1e-9);
    assert!(max_relative_error(&corrupted, &numeric) > 1e-2);
}

#[test]
fn engine_works_at_f32() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(&[3], vec![1.0f32, 2.0, 3.0], true).unwrap();
    let y = g.mul(x, x).unwrap();
    let root = g.sum_all(y).unwrap();
    assert_eq!(g.value_scalar(root), 14.0);
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0f32, 4.0, 6.0]);
    let err = finite_diff_check(&mut g, root, &[x], 1e-3f32).unwrap();
    assert!(err < 1e-2, "rel err {err}");
}
