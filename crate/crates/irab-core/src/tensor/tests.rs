use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, Tape, Tensor};

fn t(values: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(values.to_vec(), shape).unwrap()
}

#[test]
fn shape_must_match_buffer() {
    assert!(Tensor::from_vec(vec![1.0, 2.0], &[3]).is_err());
    let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    assert_eq!(t.numel(), 4);
}

#[test]
fn detach_is_constant_copy() {
    let q = p(&[1.0, 2.0], &[2]);
    let d = q.detach();
    assert!(!d.requires_grad());
    assert_eq!(d.to_vec(), vec![1.0, 2.0]);
    assert_ne!(d.id(), q.id());
}

#[test]
fn grad_slot_initially_absent() {
    let q = p(&[0.5], &[1]);
    assert!(q.grad().is_none());
    assert_eq!(q.grad_or_zeros(), vec![0.0]);
}

fn p(values: &[f64], shape: &[usize]) -> Tensor {
    Tensor::param(values.to_vec(), shape).unwrap()
}

/// Naive six-loop cross-correlation; the reference the optimized kernel
/// must match bit-for-bit (bias first, then ascending (i, kh, kw)).
#[allow(clippy::too_many_arguments)]
fn conv2d_reference(
    x: &[f64],
    xs: (usize, usize, usize, usize),
    w: &[f64],
    ws: (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Vec<f64> {
    let (n, ci, h, wid) = xs;
    let (co, _, k) = ws;
    let span = dilation * (k - 1) + 1;
    let oh = (h + 2 * padding - span) / stride + 1;
    let ow = (wid + 2 * padding - span) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias[o];
                    for i in 0..ci {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (y * stride + kh * dilation) as i64 - padding as i64;
                                let iw = (xo * stride + kw * dilation) as i64 - padding as i64;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wid {
                                    acc += x[((b * ci + i) * h + ih as usize) * wid + iw as usize]
                                        * w[((o * ci + i) * k + kh) * k + kw];
                                }
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn add_pointwise() {
    let tape = Tape::new();
    let out = tape.add(&t(&[1.0, 2.0], &[2]), &t(&[3.0, 4.0], &[2])).unwrap();
    assert_eq!(out.to_vec(), vec![4.0, 6.0]);
}

#[test]
fn scale_by_zero_annihilates() {
    let tape = Tape::new();
    let out = tape.scale(&t(&[1.0, 2.0], &[2]), 0.0).unwrap();
    assert_eq!(out.to_vec(), vec![0.0, 0.0]);
}

#[test]
fn mul_forward_and_backward() {
    let tape = Tape::new();
    let a = p(&[2.0, 3.0], &[2]);
    let b = p(&[4.0, 5.0], &[2]);
    let out = tape.mul(&a, &b).unwrap();
    assert_eq!(out.to_vec(), vec![8.0, 15.0]);
    // upstream of ones == sum reduction
    let loss = tape.sum(&out).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(a.grad().unwrap(), vec![4.0, 5.0]);
    assert_eq!(b.grad().unwrap(), vec![2.0, 3.0]);

    let err = grad_check(
        |tp, x| {
            let c = t(&[4.0, 5.0], &[2]);
            let y = tp.mul(x, &c)?;
            tp.sum(&y)
        },
        &t(&[2.0, 3.0], &[2]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "mul finite-difference error {}", err);
}

#[test]
fn elementwise_shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let err = tape
        .add(&t(&[1.0], &[1]), &t(&[1.0, 2.0], &[2]))
        .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[1]") && msg.contains("[2]"), "got: {}", msg);
}

#[test]
fn conv2d_identity_kernel() {
    let tape = Tape::new();
    let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
    let w = t(&[1.0], &[1, 1, 1, 1]);
    let b = t(&[0.0], &[1]);
    let y = tape.conv2d(&x, &w, &b, 1, 0, 1).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn conv2d_hand_cross_correlation() {
    let tape = Tape::new();
    let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
    let w = t(&[1.0, 1.0, 1.0, 1.0], &[1, 1, 2, 2]);
    let b = t(&[0.0], &[1]);
    let y = tape.conv2d(&x, &w, &b, 1, 0, 1).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 1, 1]);
    assert_eq!(y.to_vec(), vec![10.0]);
}

#[test]
fn conv2d_zero_input_zero_output() {
    let tape = Tape::new();
    let x = Tensor::zeros(&[1, 2, 4, 4]);
    let w = t(&(0..2 * 2 * 9).map(|i| i as f64).collect::<Vec<_>>(), &[2, 2, 3, 3]);
    let b = t(&[0.0, 0.0], &[2]);
    let y = tape.conv2d(&x, &w, &b, 1, 1, 1).unwrap();
    assert!(y.to_vec().iter().all(|v| *v == 0.0));
}

#[test]
fn conv2d_rejects_inconsistent_channels() {
    let tape = Tape::new();
    let x = Tensor::zeros(&[1, 3, 4, 4]);
    let w = Tensor::zeros(&[2, 2, 3, 3]);
    let b = Tensor::zeros(&[2]);
    assert!(tape.conv2d(&x, &w, &b, 1, 1, 1).is_err());
}

#[test]
fn conv2d_rejects_empty_output() {
    let tape = Tape::new();
    let x = Tensor::zeros(&[1, 1, 2, 2]);
    let w = Tensor::zeros(&[1, 1, 3, 3]);
    let b = Tensor::zeros(&[1]);
    assert!(tape.conv2d(&x, &w, &b, 1, 0, 1).is_err());
}

#[test]
fn conv2d_matches_naive_reference_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (n, ci, co, h, w, k, s, pd, d) in [
        (1, 1, 1, 4, 4, 3, 1, 1, 1),
        (2, 4, 3, 8, 8, 3, 1, 1, 1),
        (1, 2, 2, 8, 6, 3, 2, 1, 1),
        (2, 3, 4, 8, 8, 3, 1, 2, 2),
        (1, 2, 5, 7, 8, 1, 1, 0, 1),
        (2, 4, 2, 8, 8, 5, 2, 2, 1),
    ] {
        let xv: Vec<f64> = (0..n * ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..co * ci * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bv: Vec<f64> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let y = tape
            .conv2d(
                &t(&xv, &[n, ci, h, w]),
                &t(&wv, &[co, ci, k, k]),
                &t(&bv, &[co]),
                s,
                pd,
                d,
            )
            .unwrap();
        let reference = conv2d_reference(&xv, (n, ci, h, w), &wv, (co, ci, k), &bv, s, pd, d);
        assert_eq!(y.to_vec(), reference, "mismatch for case {:?}", (n, ci, co, h, w, k, s, pd, d));
    }
}

#[test]
fn max_pool_basics() {
    let tape = Tape::new();
    let y = tape.max_pool2d(&t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2])).unwrap();
    assert_eq!(y.to_vec(), vec![4.0]);

    // constant map: value preserved, gradient routed to the first element
    let x = p(&[5.0; 4], &[1, 1, 2, 2]);
    let y = tape.max_pool2d(&x).unwrap();
    assert_eq!(y.to_vec(), vec![5.0]);
    let loss = tape.sum(&y).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);

    assert!(tape.max_pool2d(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
}

#[test]
fn max_pool_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xv: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tape = Tape::new();
    let y = tape.max_pool2d(&t(&xv, &[1, 1, 4, 4])).unwrap();
    let mut expect = Vec::new();
    for i in 0..2 {
        for j in 0..2 {
            let vals = [
                xv[4 * (2 * i) + 2 * j],
                xv[4 * (2 * i) + 2 * j + 1],
                xv[4 * (2 * i + 1) + 2 * j],
                xv[4 * (2 * i + 1) + 2 * j + 1],
            ];
            expect.push(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    assert_eq!(y.to_vec(), expect);
}

#[test]
fn relu_values_and_gradient() {
    let tape = Tape::new();
    let y = tape.relu(&t(&[-1.0, 0.0, 2.0], &[3])).unwrap();
    assert_eq!(y.to_vec(), vec![0.0, 0.0, 2.0]);

    let all_pos = t(&[0.5, 1.5], &[2]);
    assert_eq!(tape.relu(&all_pos).unwrap().to_vec(), all_pos.to_vec());

    let err = grad_check(
        |tp, x| {
            let y = tp.relu(x)?;
            tp.sum(&y)
        },
        &t(&[-0.7, 0.3, 1.2, -0.1], &[4]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "relu fd error {}", err);
}

#[test]
fn softplus_values_and_gradient() {
    let tape = Tape::new();
    let y = tape.softplus(&t(&[0.0, -50.0, 50.0], &[3])).unwrap();
    let v = y.to_vec();
    assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(v[1] > 0.0 && v[1] < 1e-20, "large negative input stays positive");
    assert!((v[2] - 50.0).abs() < 1e-15, "large input is asymptotically linear");

    let err = grad_check(
        |tp, x| {
            let y = tp.softplus(x)?;
            tp.sum(&y)
        },
        &t(&[-2.0, -0.3, 0.0, 0.7, 3.0], &[5]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "softplus fd error {}", err);
}

#[test]
fn channel_softmax_symmetry_and_formula() {
    let tape = Tape::new();
    let y = tape
        .channel_softmax(&t(&[0.0, 0.0], &[1, 2, 1, 1]))
        .unwrap();
    assert_eq!(y.to_vec(), vec![0.5, 0.5]);

    // logits (+t, -t): p0 = sigma(2t)
    let tt = 0.8;
    let y = tape
        .channel_softmax(&t(&[tt, -tt], &[1, 2, 1, 1]))
        .unwrap();
    let sig = 1.0 / (1.0 + (-2.0 * tt).exp());
    assert!((y.to_vec()[0] - sig).abs() < 1e-15);
    assert!((y.to_vec()[1] - (1.0 - sig)).abs() < 1e-15);

    assert!(tape.channel_softmax(&Tensor::zeros(&[1, 3, 1, 1])).is_err());
}

#[test]
fn channel_softmax_normalizes_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xv: Vec<f64> = (0..2 * 2 * 3 * 5).map(|_| rng.random_range(-30.0..30.0)).collect();
    let tape = Tape::new();
    let y = tape.channel_softmax(&t(&xv, &[2, 2, 3, 5])).unwrap();
    let v = y.to_vec();
    let plane = 15;
    for b in 0..2 {
        for pix in 0..plane {
            let s = v[(b * 2) * plane + pix] + v[(b * 2 + 1) * plane + pix];
            assert!((s - 1.0).abs() < 1e-12, "pixel sum {}", s);
            assert!(v[(b * 2) * plane + pix] > 0.0);
        }
    }
}

#[test]
fn backward_sum_gives_ones() {
    let tape = Tape::new();
    let x = p(&[1.0, 2.0, 3.0], &[3]);
    let loss = tape.sum(&x).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_zero_mse_is_zero() {
    let tape = Tape::new();
    let a = p(&[1.0, -2.0], &[2]);
    let b = t(&[1.0, -2.0], &[2]);
    let d = tape.sub(&a, &b).unwrap();
    let sq = tape.mul(&d, &d).unwrap();
    let loss = tape.sum(&sq).unwrap();
    assert_eq!(loss.item(), 0.0);
    tape.backward(&loss).unwrap();
    assert_eq!(a.grad().unwrap(), vec![0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = p(&[1.0, 2.0], &[2]);
    let y = tape.relu(&x).unwrap();
    assert!(tape.backward(&y).is_err());
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xv: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wv: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tape = Tape::new();
    let x = p(&xv, &[1, 1, 4, 8]);
    let w = p(&wv, &[1, 1, 3, 3]);
    let b = p(&[0.1], &[1]);
    let c = tape.conv2d(&x, &w, &b, 1, 1, 1).unwrap();
    let r = tape.relu(&c).unwrap();
    let loss = tape.sum(&r).unwrap();

    tape.backward(&loss).unwrap();
    let g1 = (x.grad().unwrap(), w.grad().unwrap(), b.grad().unwrap());
    tape.backward(&loss).unwrap();
    let g2 = (x.grad().unwrap(), w.grad().unwrap(), b.grad().unwrap());
    assert_eq!(g1, g2);
}

#[test]
fn grad_check_linear_is_exact() {
    let err = grad_check(
        |tp, x| {
            let c = t(&[2.0, -3.0, 0.5], &[3]);
            let y = tp.mul(x, &c)?;
            tp.sum(&y)
        },
        &t(&[0.4, -0.2, 0.9], &[3]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "linear fd error {}", err);
}

#[test]
fn grad_check_quadratic() {
    let err = grad_check(
        |tp, x| {
            let y = tp.mul(x, x)?;
            tp.sum(&y)
        },
        &t(&[0.4, -0.2, 0.9, 1.3], &[4]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "quadratic fd error {}", err);
}

#[test]
fn grad_check_small_convnet() {
    // conv -> relu -> pool -> conv -> sum, differentiated w.r.t. the input
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w1v: Vec<f64> = (0..2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w2v: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let xv: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = move |tp: &Tape, x: &Tensor| {
        let w1 = t(&w1v, &[2, 1, 3, 3]);
        let b1 = t(&[0.05, -0.02], &[2]);
        let w2 = t(&w2v, &[1, 2, 1, 1]);
        let b2 = t(&[0.01], &[1]);
        let c1 = tp.conv2d(x, &w1, &b1, 1, 1, 1)?;
        let r1 = tp.relu(&c1)?;
        let pl = tp.max_pool2d(&r1)?;
        let c2 = tp.conv2d(&pl, &w2, &b2, 1, 0, 1)?;
        tp.sum(&c2)
    };
    let err = grad_check(f, &t(&xv, &[1, 1, 6, 6]), 1e-5).unwrap();
    assert!(err < 1e-4, "convnet fd error {}", err);
}

#[test]
fn nll_ops_match_hand_values() {
    let tape = Tape::new();
    // (1,2,1,2) posterior: pixel 0 = (0.9, 0.1), pixel 1 = (0.25, 0.75)
    let probs = t(&[0.9, 0.25, 0.1, 0.75], &[1, 2, 1, 2]);
    let loss = tape.nll_sparse(&probs, &[(0, 1, 1)]).unwrap();
    assert!((loss.item() - (-(0.75f64.ln()))).abs() < 1e-15);

    let empty = tape.nll_sparse(&probs, &[]).unwrap();
    assert_eq!(empty.item(), 0.0);

    let dense = tape.nll_dense(&probs, &[0, 1]).unwrap();
    assert!((dense.item() - (-(0.9f64.ln()) - 0.75f64.ln())).abs() < 1e-15);

    assert!(tape.nll_sparse(&probs, &[(0, 5, 1)]).is_err());
    assert!(tape.nll_sparse(&probs, &[(0, 0, 2)]).is_err());
}

#[test]
fn nll_gradient_matches_finite_differences() {
    // logits -> softmax -> sparse nll, checked end to end
    let err = grad_check(
        |tp, x| {
            let probs = tp.channel_softmax(x)?;
            tp.nll_sparse(&probs, &[(0, 0, 1), (1, 1, 0)])
        },
        &t(&[0.3, -0.4, 0.8, 0.2, -0.6, 1.1, 0.05, -0.9], &[1, 2, 2, 2]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "nll fd error {}", err);
}

#[test]
fn unreachable_parameters_keep_absent_grad() {
    let tape = Tape::new();
    let used = p(&[1.0], &[1]);
    let unused = p(&[2.0], &[1]);
    let y = tape.scale(&used, 3.0).unwrap();
    let _also_recorded = tape.scale(&unused, 2.0).unwrap();
    tape.backward(&y).unwrap();
    assert_eq!(used.grad().unwrap(), vec![3.0]);
    assert!(unused.grad().is_none());
    assert_eq!(unused.grad_or_zeros(), vec![0.0]);
}

#[test]
fn fd_safety_flags_kinks_and_ties() {
    let tape = Tape::new();
    let _ = tape.relu(&t(&[0.5, -0.4], &[2])).unwrap();
    assert!(tape.fd_safe(1e-5));
    let _ = tape.relu(&t(&[1e-7], &[1])).unwrap();
    assert!(!tape.fd_safe(1e-5));

    let tape2 = Tape::new();
    let _ = tape2
        .max_pool2d(&t(&[1.0, 1.0, 0.0, 0.0], &[1, 1, 2, 2]))
        .unwrap();
    assert!(!tape2.fd_safe(1e-5));
}
