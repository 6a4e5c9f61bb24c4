//! Dense loops shared by forward and backward passes. All buffers are
//! row-major and sized by the caller.

use crate::scalar::Scalar;

/// `out += a [m x k] * b [k x p]`
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += a [m x k] * b^T` where `b` is stored as `[p x k]`.
pub(crate) fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * p + j] += acc;
        }
    }
}

/// `out += a^T * b` where `a` is stored as `[k x m]` and `b` as `[k x p]`.
pub(crate) fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for kk in 0..k {
        let b_row = &b[kk * p..(kk + 1) * p];
        for i in 0..m {
            let aki = a[kk * m + i];
            if aki == T::zero() {
                continue;
            }
            let out_row = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aki * bv;
            }
        }
    }
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Output index range `[lo, hi)` along one axis for kernel tap `k` of a
/// 3-tap, zero-padded, stride-1 convolution over an axis of length `len`.
#[inline]
fn tap_range(k: usize, len: usize) -> (usize, usize) {
    // input index = out + k - 1 must land in [0, len)
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { len - 1 } else { len };
    (lo, hi.max(lo))
}

/// 3x3 same-padding convolution. `w` is `[c_out x c_in x 3 x 3]`.
pub(crate) fn conv3x3_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    out: &mut [T],
    c_in: usize,
    c_out: usize,
    h: usize,
    wd: usize,
) {
    let plane = h * wd;
    for o in 0..c_out {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        for c in 0..c_in {
            let in_plane = &x[c * plane..(c + 1) * plane];
            for ky in 0..3 {
                let (y0, y1) = tap_range(ky, h);
                for kx in 0..3 {
                    let wv = w[((o * c_in + c) * 3 + ky) * 3 + kx];
                    let (x0, x1) = tap_range(kx, wd);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let iy = y + ky - 1;
                        let src = &in_plane[iy * wd + x0 + kx - 1..iy * wd + x1 + kx - 1];
                        let dst = &mut out_plane[y * wd + x0..y * wd + x1];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input and weight gradients of [`conv3x3_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    d_out: &[T],
    d_x: Option<&mut [T]>,
    d_w: Option<&mut [T]>,
    c_in: usize,
    c_out: usize,
    h: usize,
    wd: usize,
) {
    let plane = h * wd;
    if let Some(d_x) = d_x {
        for o in 0..c_out {
            let g_plane = &d_out[o * plane..(o + 1) * plane];
            for c in 0..c_in {
                let dx_plane = &mut d_x[c * plane..(c + 1) * plane];
                for ky in 0..3 {
                    let (y0, y1) = tap_range(ky, h);
                    for kx in 0..3 {
                        let wv = w[((o * c_in + c) * 3 + ky) * 3 + kx];
                        let (x0, x1) = tap_range(kx, wd);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = y + ky - 1;
                            let src = &g_plane[y * wd + x0..y * wd + x1];
                            let dst = &mut dx_plane[iy * wd + x0 + kx - 1..iy * wd + x1 + kx - 1];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(d_w) = d_w {
        for o in 0..c_out {
            let g_plane = &d_out[o * plane..(o + 1) * plane];
            for c in 0..c_in {
                let in_plane = &x[c * plane..(c + 1) * plane];
                for ky in 0..3 {
                    let (y0, y1) = tap_range(ky, h);
                    for kx in 0..3 {
                        let (x0, x1) = tap_range(kx, wd);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let iy = y + ky - 1;
                            let a = &g_plane[y * wd + x0..y * wd + x1];
                            let b = &in_plane[iy * wd + x0 + kx - 1..iy * wd + x1 + kx - 1];
                            for (&p, &q) in a.iter().zip(b) {
                                acc += p * q;
                            }
                        }
                        d_w[((o * c_in + c) * 3 + ky) * 3 + kx] += acc;
                    }
                }
            }
        }
    }
}
