//! Shared numeric kernels.
//!
//! Every reduction (matmul inner products, sums, softmax denominators, norms)
//! accumulates in `f64` regardless of the element type, so the `f32` tape and
//! the `f64` replay used for finite differences compute the same function up
//! to final rounding. Loop orders are fixed; nothing here depends on thread
//! scheduling, so results are bitwise reproducible.

use super::scalar::Scalar;

/// `C = A @ B` for row-major `A: m×k`, `B: k×n`.
///
/// Walks `i, k, j` so the inner loop is a contiguous AXPY over a per-row `f64`
/// accumulator; this vectorises well and keeps the accumulator in cache.
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![S::ZERO; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        for v in acc.iter_mut() {
            *v = 0.0;
        }
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let af = av.to_f64();
            let b_row = &b[kk * n..kk * n + n];
            for (slot, &bv) in acc.iter_mut().zip(b_row.iter()) {
                *slot += af * bv.to_f64();
            }
        }
        for (dst, &src) in out[i * n..(i + 1) * n].iter_mut().zip(acc.iter()) {
            *dst = S::from_f64(src);
        }
    }
    out
}

/// Out-of-place transpose of a row-major `rows×cols` matrix.
pub(crate) fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![S::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub(crate) fn ew_add<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub(crate) fn ew_sub<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub(crate) fn ew_mul<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

pub(crate) fn add_scalar<S: Scalar>(a: &[S], c: f32) -> Vec<S> {
    let cv = S::from_f32(c);
    a.iter().map(|&x| x + cv).collect()
}

pub(crate) fn mul_scalar<S: Scalar>(a: &[S], c: f32) -> Vec<S> {
    let cv = S::from_f32(c);
    a.iter().map(|&x| x * cv).collect()
}

/// `x: n×d` plus a length-`d` row vector broadcast over rows.
pub(crate) fn add_row_vec<S: Scalar>(x: &[S], b: &[S], n: usize, d: usize) -> Vec<S> {
    debug_assert_eq!(x.len(), n * d);
    debug_assert_eq!(b.len(), d);
    let mut out = vec![S::ZERO; n * d];
    for r in 0..n {
        let src = &x[r * d..(r + 1) * d];
        let dst = &mut out[r * d..(r + 1) * d];
        for ((o, &xv), &bv) in dst.iter_mut().zip(src).zip(b.iter()) {
            *o = xv + bv;
        }
    }
    out
}

pub(crate) fn ew_exp<S: Scalar>(a: &[S]) -> Vec<S> {
    a.iter().map(|&x| S::from_f64(x.to_f64().exp())).collect()
}

pub(crate) fn ew_ln<S: Scalar>(a: &[S]) -> Vec<S> {
    a.iter().map(|&x| S::from_f64(x.to_f64().ln())).collect()
}

pub(crate) fn ew_abs<S: Scalar>(a: &[S]) -> Vec<S> {
    a.iter().map(|&x| x.abs()).collect()
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU on one value.
pub(crate) fn gelu_f64(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Derivative of [`gelu_f64`].
pub(crate) fn gelu_grad_f64(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn ew_gelu<S: Scalar>(a: &[S]) -> Vec<S> {
    a.iter().map(|&x| S::from_f64(gelu_f64(x.to_f64()))).collect()
}

/// Row-wise log-softmax of `x: n×d`, stabilised by subtracting the row max.
pub(crate) fn row_log_softmax<S: Scalar>(x: &[S], n: usize, d: usize) -> Vec<S> {
    debug_assert_eq!(x.len(), n * d);
    let mut out = vec![S::ZERO; n * d];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mut mx = f64::NEG_INFINITY;
        for &v in row {
            let vf = v.to_f64();
            if vf > mx {
                mx = vf;
            }
        }
        let mut denom = 0.0f64;
        for &v in row {
            denom += (v.to_f64() - mx).exp();
        }
        let log_denom = denom.ln();
        for (dst, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            *dst = S::from_f64(v.to_f64() - mx - log_denom);
        }
    }
    out
}

pub(crate) const L2_EPS: f64 = 1e-12;

/// Row-wise L2 normalisation of `x: n×d` with an epsilon-guarded norm.
pub(crate) fn row_l2_normalize<S: Scalar>(x: &[S], n: usize, d: usize) -> Vec<S> {
    debug_assert_eq!(x.len(), n * d);
    let mut out = vec![S::ZERO; n * d];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mut q = 0.0f64;
        for &v in row {
            let vf = v.to_f64();
            q += vf * vf;
        }
        let nrm = (q + L2_EPS).sqrt();
        for (dst, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            *dst = S::from_f64(v.to_f64() / nrm);
        }
    }
    out
}

pub(crate) fn sum_all<S: Scalar>(a: &[S]) -> S {
    let mut acc = 0.0f64;
    for &v in a {
        acc += v.to_f64();
    }
    S::from_f64(acc)
}

pub(crate) fn mean_all<S: Scalar>(a: &[S]) -> S {
    let mut acc = 0.0f64;
    for &v in a {
        acc += v.to_f64();
    }
    S::from_f64(acc / a.len() as f64)
}

/// Reduction along one axis of an arbitrary-rank array.
///
/// With `shape` split as `outer × mid × inner` around `axis`, the output is
/// `outer × inner` laid out with the reduced axis removed.
pub(crate) fn reduce_axis<S: Scalar>(
    a: &[S],
    shape: &[usize],
    axis: usize,
    mean: bool,
) -> Vec<S> {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![S::ZERO; outer * inner];
    let mut acc = vec![0.0f64; inner];
    let scale = if mean { 1.0 / mid as f64 } else { 1.0 };
    for o in 0..outer {
        for v in acc.iter_mut() {
            *v = 0.0;
        }
        for m in 0..mid {
            let base = (o * mid + m) * inner;
            let row = &a[base..base + inner];
            for (slot, &v) in acc.iter_mut().zip(row) {
                *slot += v.to_f64();
            }
        }
        for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(acc.iter()) {
            *dst = S::from_f64(v * scale);
        }
    }
    out
}

/// Gathers sliding windows of `src: c×h×w` into a `(c·kh·kw) × (gh·gw)`
/// matrix; grid position `(gy, gx)` reads `src[ch][gy*stride + ki - pad][gx*stride + kj - pad]`
/// (zero outside the image). Used by the conv forward and the transposed-conv
/// backward pass, which share this exact index map.
#[allow(clippy::too_many_arguments)]
pub(crate) fn unfold<S: Scalar>(
    src: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
) -> Vec<S> {
    debug_assert_eq!(src.len(), c * h * w);
    let m = gh * gw;
    let mut cols = vec![S::ZERO; c * kh * kw * m];
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let krow = ((ch * kh + ki) * kw + kj) * m;
                for gy in 0..gh {
                    let sy = (gy * stride + ki) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = (ch * h + sy as usize) * w;
                    let dst_row = krow + gy * gw;
                    for gx in 0..gw {
                        let sx = (gx * stride + kj) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[dst_row + gx] = src[src_row + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a `(c·kh·kw) × (gh·gw)` matrix back into `dst: c×h×w`, the
/// exact adjoint of [`unfold`]. Used by the conv backward pass and the
/// transposed-conv forward pass.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fold_add<S: Scalar>(
    cols: &[S],
    dst: &mut [S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
) {
    let m = gh * gw;
    debug_assert_eq!(cols.len(), c * kh * kw * m);
    debug_assert_eq!(dst.len(), c * h * w);
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let krow = ((ch * kh + ki) * kw + kj) * m;
                for gy in 0..gh {
                    let sy = (gy * stride + ki) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = (ch * h + sy as usize) * w;
                    let src_row = krow + gy * gw;
                    for gx in 0..gw {
                        let sx = (gx * stride + kj) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[dst_row + sx as usize] = dst[dst_row + sx as usize] + cols[src_row + gx];
                    }
                }
            }
        }
    }
}
