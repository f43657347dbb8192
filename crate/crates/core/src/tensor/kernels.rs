//! Slice-level kernels. All loops run in a fixed order so results are
//! bitwise reproducible.

use crate::scalar::Scalar;

#[inline]
fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub(crate) fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    let mut acc = S::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    gemm_nn_strided(a, k, b, out, m, k, n);
}

/// [`gemm_nn`] where row `i` of `a` starts at `i · lda` (rows may overlap).
pub(crate) fn gemm_nn_strided<S: Scalar>(a: &[S], lda: usize, b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let mut i = 0;
    // Four output rows share every load of a `b` row.
    while i + 4 <= m {
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for p in 0..k {
            let a0 = a[i * lda + p];
            let a1 = a[(i + 1) * lda + p];
            let a2 = a[(i + 2) * lda + p];
            let a3 = a[(i + 3) * lda + p];
            let b_row = &b[p * n..(p + 1) * n];
            for ((((y0, y1), y2), y3), &bv) in o0
                .iter_mut()
                .zip(o1.iter_mut())
                .zip(o2.iter_mut())
                .zip(o3.iter_mut())
                .zip(b_row)
            {
                *y0 += a0 * bv;
                *y1 += a1 * bv;
                *y2 += a2 * bv;
                *y3 += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * lda + p], &b[p * n..(p + 1) * n], out_row);
        }
    }
}

/// `out[j] += dot(x, b_j)` for the `n` rows `b_j` of length `k`.
#[inline]
fn dots_into<S: Scalar>(x: &[S], b: &[S], out: &mut [S], k: usize, n: usize) {
    let mut j = 0;
    // Four independent accumulation chains; each keeps the sequential order of `dot`.
    while j + 4 <= n {
        let (b0, b1, b2, b3) = (
            &b[j * k..(j + 1) * k],
            &b[(j + 1) * k..(j + 2) * k],
            &b[(j + 2) * k..(j + 3) * k],
            &b[(j + 3) * k..(j + 4) * k],
        );
        let (mut s0, mut s1, mut s2, mut s3) = (S::zero(), S::zero(), S::zero(), S::zero());
        for p in 0..k {
            let xv = x[p];
            s0 += xv * b0[p];
            s1 += xv * b1[p];
            s2 += xv * b2[p];
            s3 += xv * b3[p];
        }
        out[j] += s0;
        out[j + 1] += s1;
        out[j + 2] += s2;
        out[j + 3] += s3;
        j += 4;
    }
    for j in j..n {
        out[j] += dot(x, &b[j * k..(j + 1) * k]);
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        dots_into(&a[i * k..(i + 1) * k], b, &mut out[i * n..(i + 1) * n], k, n);
    }
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    gemm_tn_strided(a, m, b, out, m, k, n);
}

/// [`gemm_tn`] where row `p` of `a` starts at `p · lda`.
pub(crate) fn gemm_tn_strided<S: Scalar>(a: &[S], lda: usize, b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        let a_row = &a[p * lda..p * lda + m];
        let mut i = 0;
        while i + 4 <= m {
            let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
            let (o1, rest) = rest.split_at_mut(n);
            let (o2, o3) = rest.split_at_mut(n);
            let (a0, a1, a2, a3) = (a_row[i], a_row[i + 1], a_row[i + 2], a_row[i + 3]);
            for ((((y0, y1), y2), y3), &bv) in o0
                .iter_mut()
                .zip(o1.iter_mut())
                .zip(o2.iter_mut())
                .zip(o3.iter_mut())
                .zip(b_row)
            {
                *y0 += a0 * bv;
                *y1 += a1 * bv;
                *y2 += a2 * bv;
                *y3 += a3 * bv;
            }
            i += 4;
        }
        for i in i..m {
            axpy(a_row[i], b_row, &mut out[i * n..(i + 1) * n]);
        }
    }
}

/// Geometry of a batched valid 1-D convolution over `[batch, len, c_in]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub len: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl ConvDims {
    pub fn out_len(&self) -> usize {
        (self.len - self.kernel) / self.stride + 1
    }
}

// A receptive field `x[o·stride .. o·stride + kernel, :]` is contiguous in
// the `[len, c_in]` layout, so the convolution is a product of overlapping
// window rows with the `[kernel·c_in, c_out]` weight matrix.

pub(crate) fn conv1d_forward<S: Scalar>(x: &[S], w: &[S], out: &mut [S], d: ConvDims) {
    let lo = d.out_len();
    let win = d.kernel * d.c_in;
    for b in 0..d.batch {
        let xb = &x[b * d.len * d.c_in..(b + 1) * d.len * d.c_in];
        let ob = &mut out[b * lo * d.c_out..(b + 1) * lo * d.c_out];
        gemm_nn_strided(xb, d.stride * d.c_in, w, ob, lo, win, d.c_out);
    }
}

pub(crate) fn conv1d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dout: &[S],
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
    d: ConvDims,
) {
    let lo = d.out_len();
    let win = d.kernel * d.c_in;
    if let Some(dx) = dx {
        // `w` viewed as `[win, c_out]`: the window gradient is `g · wᵀ`.
        let mut tmp = vec![S::zero(); win];
        for b in 0..d.batch {
            for o in 0..lo {
                let g = &dout[(b * lo + o) * d.c_out..(b * lo + o + 1) * d.c_out];
                tmp.iter_mut().for_each(|v| *v = S::zero());
                dots_into(g, w, &mut tmp, d.c_out, win);
                let start = (b * d.len + o * d.stride) * d.c_in;
                for (dst, &v) in dx[start..start + win].iter_mut().zip(&tmp) {
                    *dst += v;
                }
            }
        }
    }
    if let Some(dw) = dw {
        for b in 0..d.batch {
            let xb = &x[b * d.len * d.c_in..(b + 1) * d.len * d.c_in];
            let gb = &dout[b * lo * d.c_out..(b + 1) * lo * d.c_out];
            gemm_tn_strided(xb, d.stride * d.c_in, gb, dw, win, lo, d.c_out);
        }
    }
}

/// Softmax of each contiguous row of width `n`, max-subtracted.
pub(crate) fn softmax_rows<S: Scalar>(x: &[S], out: &mut [S], n: usize) {
    for (xr, yr) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = xr.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut sum = S::zero();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            sum += *y;
        }
        let inv = S::one() / sum;
        for y in yr.iter_mut() {
            *y *= inv;
        }
    }
}

pub(crate) fn log_softmax_rows<S: Scalar>(x: &[S], out: &mut [S], n: usize) {
    for (xr, yr) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = xr.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let lse = max + xr.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = v - lse;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + S::lit(3.0) * a * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}
