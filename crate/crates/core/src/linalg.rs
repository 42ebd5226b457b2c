//! Dense kernels behind the tape ops. All accumulation runs in a fixed
//! index order so results are run-to-run identical.

use crate::scalar::Scalar;

/// c (m,n) += a (m,k) * b (k,n)
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
}

/// c (k,n) += a^T (m,k)^T * b (m,n), with a given in (m,k) layout.
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::ZERO {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
}

/// out (cols,rows) = transpose of a (rows,cols)
pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize, out: &mut Vec<S>) {
    out.clear();
    out.resize(rows * cols, S::ZERO);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// Lay one sample (C,H,W) out as the patch matrix (C*kh*kw, oh*ow) for a
/// cross-correlation with the given stride and zero padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [S],
) {
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in dst.iter_mut() {
                            *v = S::ZERO;
                        }
                        continue;
                    }
                    let src_base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize {
                            S::ZERO
                        } else {
                            x[src_base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto the input gradient,
/// inverting `im2col`.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<S: Scalar>(
    col: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [S],
) {
    debug_assert_eq!(dx.len(), c * h * w);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = (ci * h + iy as usize) * w;
                    let src = &col[row + oy * ow..row + (oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[dst_base + ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        matmul_acc(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_tn_small() {
        // a^T * a for a = [1 2; 3 4] -> [10 14; 14 20]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let mut c = [0.0f32; 4];
        matmul_tn_acc(&a, &a, &mut c, 2, 2, 2);
        assert_eq!(c, [10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    fn im2col_roundtrips_through_col2im() {
        let (c, h, w, kh, kw, stride, pad) = (2usize, 4usize, 5usize, 3usize, 3usize, 1usize, 1usize);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let x: Vec<f64> = (0..c * h * w).map(|i| i as f64 * 0.1).collect();
        let mut col = vec![0.0f64; c * kh * kw * oh * ow];
        im2col(&x, c, h, w, kh, kw, stride, pad, oh, ow, &mut col);
        // col2im of the identity-gradient counts how many patches touch each
        // pixel; every interior pixel of a 3x3/pad-1 conv is touched 9 times.
        let ones = vec![1.0f64; col.len()];
        let mut counts = vec![0.0f64; c * h * w];
        col2im_acc(&ones, c, h, w, kh, kw, stride, pad, oh, ow, &mut counts);
        assert_eq!(counts[(1 * h + 2) * w + 2], 9.0);
        // corner pixel of each channel only appears in 4 patches
        assert_eq!(counts[0], 4.0);
    }
}
