//! Slice-level numeric kernels shared by the tape ops and the cached
//! (tape-free) decoding path. Both paths must call the same kernels so that
//! incremental decoding reproduces the full forward pass bit for bit.
//!
//! Every kernel processes rows independently and accumulates dot products in
//! ascending index order, so a row's result never depends on how many other
//! rows are in the batch.

use super::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `out[m x n] = a[m x k] . b[k x n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(T::zero());
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k x n] += a[m x k]^T . g[m x n]`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m x k] += g[m x n] . b[k x n]^T`.
pub fn matmul_nt_acc<T: Scalar>(g: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let bt = transpose(b, k, n);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, &gv) in grow.iter().enumerate() {
            if gv == T::zero() {
                continue;
            }
            let btrow = &bt[j * k..(j + 1) * k];
            for (o, &bv) in orow.iter_mut().zip(btrow) {
                *o += gv * bv;
            }
        }
    }
}

/// Transpose of a row-major `[rows x cols]` matrix.
pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `out[r, :] = x[r, :] + bias`.
pub fn add_bias<T: Scalar>(x: &[T], bias: &[T], out: &mut [T]) {
    let n = bias.len();
    for (orow, xrow) in out.chunks_exact_mut(n).zip(x.chunks_exact(n)) {
        for ((o, &xv), &bv) in orow.iter_mut().zip(xrow).zip(bias) {
            *o = xv + bv;
        }
    }
}

/// Per-row layer normalization. Writes the normalized-but-unscaled rows into
/// `xhat` and the reciprocal standard deviations into `rstd` when given.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    out: &mut [T],
    mut xhat: Option<&mut [T]>,
    mut rstd: Option<&mut [T]>,
) {
    let n = gain.len();
    let nf = T::of_f64(n as f64);
    let eps = T::of_f64(LAYER_NORM_EPS);
    for (r, (xrow, orow)) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
        let mean = xrow.iter().copied().sum::<T>() / nf;
        let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let rs = T::one() / (var + eps).sqrt();
        for (j, (o, &v)) in orow.iter_mut().zip(xrow).enumerate() {
            let h = (v - mean) * rs;
            if let Some(xh) = xhat.as_deref_mut() {
                xh[r * n + j] = h;
            }
            *o = h * gain[j] + bias[j];
        }
        if let Some(rsd) = rstd.as_deref_mut() {
            rsd[r] = rs;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of_f64(GELU_C);
    let a = T::of_f64(GELU_A);
    let half = T::of_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of_f64(GELU_C);
    let a = T::of_f64(GELU_A);
    let half = T::of_f64(0.5);
    let three = T::of_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Max-shifted log-softmax of every row of width `n`.
pub fn log_softmax_rows<T: Scalar>(x: &[T], n: usize, out: &mut [T]) {
    for (xrow, orow) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xrow.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = xrow.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = v - lse;
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Multi-head attention of one query row over `n_keys` key/value rows of
/// width `d`. Writes the `d`-wide output and, when given, the per-head
/// attention probabilities laid out as `[heads x n_keys]`.
#[allow(clippy::too_many_arguments)]
pub fn attend_row<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    n_keys: usize,
    heads: usize,
    out: &mut [T],
    scores: &mut Vec<T>,
    mut probs: Option<&mut [T]>,
) {
    let d = q.len();
    let dh = d / heads;
    let scale = T::one() / T::of_f64(dh as f64).sqrt();
    scores.clear();
    scores.resize(n_keys, T::zero());
    out.fill(T::zero());
    for h in 0..heads {
        let lo = h * dh;
        let qh = &q[lo..lo + dh];
        let mut max = T::neg_infinity();
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * d + lo..j * d + lo + dh];
            let dot: T = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum();
            *s = dot * scale;
            if *s > max {
                max = *s;
            }
        }
        let mut total = T::zero();
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        let oh = &mut out[lo..lo + dh];
        for (j, s) in scores.iter_mut().enumerate() {
            *s = *s / total;
            let vh = &values[j * d + lo..j * d + lo + dh];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o += *s * v;
            }
        }
        if let Some(p) = probs.as_deref_mut() {
            p[h * n_keys..(h + 1) * n_keys].copy_from_slice(scores);
        }
    }
}
