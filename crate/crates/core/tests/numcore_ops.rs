//! Primitive-op oracles: frozen hand values, an independent direct
//! convolution, finite differences, and the tape's algebraic invariants.

use normshift_core::gradcheck::{grad_check_multi, DEFAULT_EPS};
use normshift_core::tape::{Reduction, Tape};
use normshift_core::tensor::Tensor4;
use normshift_core::Scalar;

fn t4(n: usize, c: usize, h: usize, w: usize, data: &[f32]) -> Tensor4 {
    Tensor4::from_vec(n, c, h, w, data.to_vec()).unwrap()
}

/// Scalar quadruple-loop cross-correlation, independent of the im2col path.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &Tensor4,
    w: &[f32],
    wdims: (usize, usize, usize, usize),
    b: &[f32],
    stride: usize,
    pad: usize,
) -> Tensor4 {
    let (cout, cin, kh, kw) = wdims;
    let oh = (x.h + 2 * pad - kh) / stride + 1;
    let ow = (x.w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor4::zeros(x.n, cout, oh, ow);
    for n in 0..x.n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < x.h as isize && ix >= 0 && ix < x.w as isize {
                                    acc += x.at(n, ci, iy as usize, ix as usize)
                                        * w[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

fn run_conv(x: &Tensor4, w: &[f32], wd: (usize, usize, usize, usize), b: &[f32], stride: usize, pad: usize) -> Tensor4 {
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(x);
    let wv = tape.leaf_from_f32(&[wd.0, wd.1, wd.2, wd.3], w).unwrap();
    let bv = tape.leaf_from_f32(&[wd.0], b).unwrap();
    let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
    tape.read4(y).unwrap()
}

#[test]
fn conv_identity_kernel_is_bitwise_identity() {
    let x = t4(2, 3, 4, 5, &(0..120).map(|i| (i as f32 * 0.37).sin()).collect::<Vec<_>>());
    // 1x1 kernel = identity matrix across channels.
    let mut w = vec![0.0f32; 9];
    for c in 0..3 {
        w[c * 3 + c] = 1.0;
    }
    let y = run_conv(&x, &w, (3, 3, 1, 1), &[0.0; 3], 1, 0);
    assert_eq!(y.data, x.data);
}

#[test]
fn conv_zero_weights_give_bias() {
    let x = t4(1, 2, 3, 3, &[0.5; 18]);
    let y = run_conv(&x, &[0.0; 2 * 2 * 9], (2, 2, 3, 3), &[1.5, -2.0], 1, 1);
    for c in 0..2 {
        for i in 0..9 {
            assert_eq!(y.data[c * 9 + i], if c == 0 { 1.5 } else { -2.0 });
        }
    }
}

#[test]
fn conv_matches_hand_case_and_oracle() {
    let x = t4(1, 1, 3, 3, &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    let w = vec![1.0f32; 4];
    let y = run_conv(&x, &w, (1, 1, 2, 2), &[0.0], 1, 0);
    assert_eq!(y.data, vec![12.0, 16.0, 24.0, 28.0]);
    let oracle = conv_oracle(&x, &w, (1, 1, 2, 2), &[0.0], 1, 0);
    assert_eq!(y.data, oracle.data);
}

#[test]
fn conv_im2col_path_matches_direct_oracle() {
    // Random-ish deterministic tensors across odd shapes, stride and pad.
    let x = t4(2, 3, 7, 6, &(0..252).map(|i| ((i * 37 % 101) as f32 - 50.0) / 23.0).collect::<Vec<_>>());
    let w: Vec<f32> = (0..4 * 3 * 9).map(|i| ((i * 13 % 29) as f32 - 14.0) / 9.0).collect();
    let b = [0.3, -0.1, 0.7, 0.0];
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let got = run_conv(&x, &w, (4, 3, 3, 3), &b, stride, pad);
        let want = conv_oracle(&x, &w, (4, 3, 3, 3), &b, stride, pad);
        for (g, w_) in got.data.iter().zip(&want.data) {
            assert!((g - w_).abs() <= 1e-6, "stride {stride} pad {pad}: {g} vs {w_}");
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let x = t4(1, 2, 3, 3, &[0.0; 18]);
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(&x);
    let wv = tape.leaf_from_f32(&[1, 3, 2, 2], &[0.0; 12]).unwrap();
    let bv = tape.leaf_from_f32(&[1], &[0.0]).unwrap();
    let err = tape.conv2d(xv, wv, bv, 1, 0).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
}

#[test]
fn maxpool_constant_and_monotone_cases() {
    let c = t4(1, 1, 4, 4, &[2.5; 16]);
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(&c);
    let y = tape.maxpool2d(xv, 2, 2).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 2.5));

    // Strictly increasing raster: each window's max is its bottom-right.
    let inc = t4(1, 1, 4, 4, &(0..16).map(|i| i as f32).collect::<Vec<_>>());
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(&inc);
    let y = tape.maxpool2d(xv, 2, 2).unwrap();
    assert_eq!(tape.value(y), &[5.0, 7.0, 13.0, 15.0]);
}

#[test]
fn maxpool_backward_routes_to_argmax() {
    let x = t4(1, 1, 2, 2, &[1.0, 4.0, 3.0, 2.0]);
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(&x);
    let y = tape.maxpool2d(xv, 2, 2).unwrap();
    assert_eq!(tape.value(y), &[4.0]);
    let loss = tape.sum_all(y);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(xv).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn maxpool_tie_breaks_to_first_in_window_order() {
    let x = t4(1, 1, 2, 2, &[7.0, 7.0, 7.0, 7.0]);
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(&x);
    let y = tape.maxpool2d(xv, 2, 2).unwrap();
    let loss = tape.sum_all(y);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(xv).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_rejects_zero_k_or_stride() {
    let x = t4(1, 1, 4, 4, &[0.0; 16]);
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(&x);
    assert!(tape.maxpool2d(xv, 0, 2).is_err());
    assert!(tape.maxpool2d(xv, 2, 0).is_err());
    assert!(tape.maxpool2d(xv, 5, 1).is_err());
}

#[test]
fn fully_connected_identity_zero_and_hand_case() {
    // W = identity, b = 0 -> y = x.
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf_from_f32(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
    let w = tape.leaf_from_f32(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let b = tape.leaf_from_f32(&[3], &[0.0; 3]).unwrap();
    let y = tape.fully_connected(x, w, b).unwrap();
    assert_eq!(tape.value(y), &[1., 2., 3., 4., 5., 6.]);

    // x = 0 -> y = b broadcast.
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf_from_f32(&[2, 2], &[0.0; 4]).unwrap();
    let w = tape.leaf_from_f32(&[3, 2], &[1.0; 6]).unwrap();
    let b = tape.leaf_from_f32(&[3], &[0.5, -1.0, 2.0]).unwrap();
    let y = tape.fully_connected(x, w, b).unwrap();
    assert_eq!(tape.value(y), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);

    // x=[1,2], W=[[1,1],[0,1]], b=[0.5,-0.5] -> [3.5, 1.5].
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf_from_f32(&[1, 2], &[1.0, 2.0]).unwrap();
    let w = tape.leaf_from_f32(&[2, 2], &[1.0, 1.0, 0.0, 1.0]).unwrap();
    let b = tape.leaf_from_f32(&[2], &[0.5, -0.5]).unwrap();
    let y = tape.fully_connected(x, w, b).unwrap();
    assert_eq!(tape.value(y), &[3.5, 1.5]);

    // Dimension mismatch is rejected.
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf_from_f32(&[1, 3], &[0.0; 3]).unwrap();
    let w = tape.leaf_from_f32(&[2, 2], &[0.0; 4]).unwrap();
    let b = tape.leaf_from_f32(&[2], &[0.0; 2]).unwrap();
    assert!(tape.fully_connected(x, w, b).is_err());
}

#[test]
fn relu_values_and_gradient_convention() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf_from_f32(&[3], &[-1.0, 0.0, 2.0]).unwrap();
    let y = tape.relu(x);
    assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    let loss = tape.sum_all(y);
    let grads = tape.backward(loss).unwrap();
    // 1 for x>0, 0 for x<0 and exactly 0 at x=0.
    assert_eq!(grads.wrt(x).unwrap(), &[0.0, 0.0, 1.0]);

    // All-negative input: zero output, zero gradient.
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf_from_f32(&[3], &[-3.0, -0.5, -1e-3]).unwrap();
    let y = tape.relu(x);
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
    let loss = tape.sum_all(y);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[0.0, 0.0, 0.0]);

    // Positive branch passes upstream gradient through: 2.0 at x=3.7.
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf_from_f32(&[1], &[3.7]).unwrap();
    let y = tape.relu(x);
    let scaled = tape.affine(y, 2.0, 0.0);
    let loss = tape.sum_all(scaled);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[2.0]);
}

#[test]
fn softmax_ce_uniform_hand_and_asymptotic_cases() {
    // All-equal logits over 10 classes: loss = ln 10.
    let mut tape = Tape::<f32>::new();
    let logits = tape.leaf_from_f32(&[1, 10], &[0.7; 10]).unwrap();
    let (loss, probs) = tape.softmax_cross_entropy(logits, &[3], Reduction::Mean).unwrap();
    assert!((tape.scalar_value(loss) - 10.0f32.ln()).abs() < 1e-6);
    assert!(probs.iter().all(|&p| (p - 0.1).abs() < 1e-6));

    // logits [2,0], label 0: loss = ln(1+e^-2), grad = [p0-1, p1].
    let mut tape = Tape::<f32>::new();
    let logits = tape.leaf_from_f32(&[1, 2], &[2.0, 0.0]).unwrap();
    let (loss, probs) = tape.softmax_cross_entropy(logits, &[0], Reduction::Mean).unwrap();
    let expect_loss = (1.0f64 + (-2.0f64).exp()).ln();
    assert!((tape.scalar_value(loss) as f64 - expect_loss).abs() < 1e-6);
    let p0 = (2.0f64.exp() / (2.0f64.exp() + 1.0)) as f32;
    assert!((probs[0] - p0).abs() < 1e-6 && (p0 - 0.880_797).abs() < 1e-5);
    let grads = tape.backward(loss).unwrap();
    let g = grads.wrt(logits).unwrap();
    assert!((g[0] - (probs[0] - 1.0)).abs() < 1e-6);
    assert!((g[1] - probs[1]).abs() < 1e-6);

    // Driving the true-class logit up sends the loss toward zero.
    let mut tape = Tape::<f32>::new();
    let logits = tape.leaf_from_f32(&[1, 3], &[40.0, 0.0, 0.0]).unwrap();
    let (loss, _) = tape.softmax_cross_entropy(logits, &[0], Reduction::Mean).unwrap();
    assert!(tape.scalar_value(loss) < 1e-6);

    // Label out of range is rejected.
    let mut tape = Tape::<f32>::new();
    let logits = tape.leaf_from_f32(&[1, 3], &[0.0; 3]).unwrap();
    assert!(tape.softmax_cross_entropy(logits, &[3], Reduction::Mean).is_err());
}

#[test]
fn softmax_rows_sum_to_one_and_ce_grad_rows_sum_to_zero() {
    let data: Vec<f32> = (0..40).map(|i| ((i * 17 % 23) as f32 - 11.0) / 3.0).collect();
    let mut tape = Tape::<f32>::new();
    let logits = tape.leaf_from_f32(&[5, 8], &data).unwrap();
    let labels = vec![0usize, 3, 7, 2, 5];
    let (loss, probs) = tape.softmax_cross_entropy(logits, &labels, Reduction::Mean).unwrap();
    for r in 0..5 {
        let s: f32 = probs[r * 8..(r + 1) * 8].iter().sum();
        assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
    }
    let grads = tape.backward(loss).unwrap();
    let g = grads.wrt(logits).unwrap();
    for r in 0..5 {
        let s: f32 = g[r * 8..(r + 1) * 8].iter().sum();
        assert!(s.abs() < 1e-6, "grad row {r} sums to {s}");
    }
}

#[test]
fn backward_of_sum_is_ones_and_dead_branch_is_zero() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf_from_f32(&[4], &[1.0, -2.0, 3.0, 0.5]).unwrap();
    let loss = tape.sum_all(x);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[1.0; 4]);

    // loss = 0 * f(x): gradient through the dead branch is exactly zero.
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf_from_f32(&[3], &[1.0, 2.0, 3.0]).unwrap();
    let f = tape.mul(x, x).unwrap();
    let s = tape.sum_all(f);
    let dead = tape.affine(s, 0.0, 0.0);
    let grads = tape.backward(dead).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[0.0; 3]);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_loss() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf_from_f32(&[2], &[1.0, 2.0]).unwrap();
    assert!(tape.backward(x).is_err());
    // A var minted on another tape has no node here.
    let mut other = Tape::<f32>::new();
    let y = other.leaf_from_f32(&[1], &[0.0]).unwrap();
    let empty = Tape::<f32>::new();
    assert!(empty.backward(y).is_err());
}

#[test]
fn composite_conv_relu_fc_ce_matches_finite_differences() {
    // 64-bit composite gradient against central differences, all inputs.
    let x: Vec<f64> = (0..2 * 2 * 5 * 5).map(|i| ((i * 29 % 47) as f64 - 23.0) / 11.0).collect();
    let w: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 7 % 31) as f64 - 15.0) / 19.0).collect();
    let fcw: Vec<f64> = (0..4 * 12).map(|i| ((i * 11 % 37) as f64 - 18.0) / 21.0).collect();
    let inputs = vec![
        (vec![2, 2, 5, 5], x),
        (vec![3, 2, 3, 3], w),
        (vec![3], vec![0.1, -0.2, 0.05]),
        (vec![4, 12], fcw),
        (vec![4], vec![0.0, 0.1, -0.1, 0.2]),
    ];
    let labels = vec![1usize, 3];
    let err = grad_check_multi(
        &inputs,
        |tape, v| {
            let conv = tape.conv2d(v[0], v[1], v[2], 1, 1)?;
            let act = tape.relu(conv);
            let pooled = tape.maxpool2d(act, 2, 2)?;
            let flat = tape.reshape(pooled, &[2, 12])?;
            let logits = tape.fully_connected(flat, v[3], v[4])?;
            let (loss, _) = tape.softmax_cross_entropy(logits, &labels, Reduction::Mean)?;
            Ok(loss)
        },
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-3, "composite gradient error {err}");
}

#[test]
fn backward_is_linear_over_loss_combination() {
    // backward(a*f + b*g) = a*backward(f) + b*backward(g) on shared inputs.
    let xdata: Vec<f32> = (0..6).map(|i| (i as f32 - 2.5) * 0.7).collect();
    let (a, b) = (2.5f32, -1.25f32);

    let grad_of = |which: u8| -> Vec<f32> {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf_from_f32(&[6], &xdata).unwrap();
        let f = {
            let sq = tape.mul(x, x).unwrap();
            tape.sum_all(sq)
        };
        let g = {
            let r = tape.relu(x);
            tape.sum_all(r)
        };
        let loss = match which {
            0 => {
                let fa = tape.affine(f, a, 0.0);
                let gb = tape.affine(g, b, 0.0);
                tape.add(fa, gb).unwrap()
            }
            1 => f,
            _ => g,
        };
        let grads = tape.backward(loss).unwrap();
        grads.wrt(x).unwrap().to_vec()
    };

    let combined = grad_of(0);
    let gf = grad_of(1);
    let gg = grad_of(2);
    for i in 0..6 {
        let expect = a * gf[i] + b * gg[i];
        assert!((combined[i] - expect).abs() <= 1e-6, "coord {i}: {} vs {expect}", combined[i]);
    }
}

#[test]
fn replaying_backward_twice_is_bitwise_identical() {
    let data: Vec<f32> = (0..2 * 3 * 4 * 4).map(|i| ((i * 53 % 71) as f32 - 35.0) / 17.0).collect();
    let x = t4(2, 3, 4, 4, &data);
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(&x);
    let r = tape.relu(xv);
    let p = tape.maxpool2d(r, 2, 2).unwrap();
    let sq = tape.mul(p, p).unwrap();
    let loss = tape.sum_all(sq);
    let g1 = tape.backward(loss).unwrap().wrt(xv).unwrap().to_vec();
    let g2 = tape.backward(loss).unwrap().wrt(xv).unwrap().to_vec();
    let bits1: Vec<u32> = g1.iter().map(|v| v.to_bits()).collect();
    let bits2: Vec<u32> = g2.iter().map(|v| v.to_bits()).collect();
    assert_eq!(bits1, bits2);
}

#[test]
fn grad_check_interface_quadratic_case() {
    // f = x^2 at 3: analytic 6, numeric 6 + O(eps^2).
    let err = grad_check_multi(
        &[(vec![1], vec![3.0])],
        |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            Ok(tape.sum_all(sq))
        },
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-8, "err={err}");
}

#[test]
fn sigmoid_tanh_sqrt_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[3], vec![-3.0, 0.0, 4.0]).unwrap();
    let s = tape.sigmoid(x);
    let v = tape.value(s);
    assert!((v[0] - 0.04742587317756678).abs() < 1e-12);
    assert_eq!(v[1], 0.5);
    let t = tape.tanh(x);
    assert!((tape.value(t)[2] - 4.0f64.tanh()).abs() < 1e-12);
    let sq = tape.leaf(&[2], vec![4.0, 0.0]).unwrap();
    let r = tape.sqrt(sq);
    assert_eq!(tape.value(r), &[2.0, 0.0]);
    // Subgradient at zero is zero, so constant channels stay finite.
    let loss = tape.sum_all(r);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(sq).unwrap(), &[0.25, 0.0]);
}
