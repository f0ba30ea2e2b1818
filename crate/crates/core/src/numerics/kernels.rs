//! Shared numeric kernels used by both the autodiff tape and the cache-backed
//! inference path. Accumulation order is fixed (ascending over the reduced
//! axis) and each output row depends only on its own input row, so full-block
//! and incremental computations of the same row agree bit for bit.

use super::Scalar;

/// `c += a @ b` with `a: [m,k]`, `b: [k,n]`, `c: [m,n]`, all row-major.
/// The k loop is outermost within each row, so every `c[i,j]` accumulates
/// its terms in ascending-k order regardless of `m`.
pub fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == S::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row.iter()) {
                *cj = *cj + aik * bj;
            }
        }
    }
}

/// Row-major transpose: `a: [m,n]` into `out: [n,m]`.
pub fn transpose<S: Scalar>(m: usize, n: usize, a: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

/// Dot product with ascending accumulation order.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc = acc + x * y;
    }
    acc
}

/// Layer normalization of one row: `out = gamma * (x - mean) / sqrt(var + eps) + beta`.
/// Returns `(mean, inv_std)` for reuse in the backward pass.
pub fn layer_norm_row<S: Scalar>(x: &[S], gamma: &[S], beta: &[S], eps: S, out: &mut [S]) -> (S, S) {
    let n = super::scalar::<S>(x.len() as f64);
    let mean = x.iter().copied().sum::<S>() / n;
    let mut var = S::zero();
    for &v in x {
        let d = v - mean;
        var = var + d * d;
    }
    var = var / n;
    let inv_std = S::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = gamma[i] * ((x[i] - mean) * inv_std) + beta[i];
    }
    (mean, inv_std)
}

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = super::scalar::<S>(GELU_C);
    let a = super::scalar::<S>(GELU_A);
    let half = super::scalar::<S>(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = super::scalar::<S>(GELU_C);
    let a = super::scalar::<S>(GELU_A);
    let half = super::scalar::<S>(0.5);
    let three = super::scalar::<S>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

/// Softmax over the entries of `row` selected by `visible`, written in place.
/// Entries with `visible == false` become exactly zero; a fully masked row
/// becomes the zero vector.
pub fn masked_softmax_row<S: Scalar>(row: &mut [S], visible: &[bool]) {
    debug_assert_eq!(row.len(), visible.len());
    let mut max = S::neg_infinity();
    for (v, &vis) in row.iter().zip(visible.iter()) {
        if vis && *v > max {
            max = *v;
        }
    }
    if max == S::neg_infinity() {
        for v in row.iter_mut() {
            *v = S::zero();
        }
        return;
    }
    let mut sum = S::zero();
    for (v, &vis) in row.iter_mut().zip(visible.iter()) {
        if vis {
            *v = (*v - max).exp();
            sum = sum + *v;
        } else {
            *v = S::zero();
        }
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Plain (unmasked) softmax of one row, in place.
pub fn softmax_row<S: Scalar>(row: &mut [S]) {
    let mut max = S::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `log(sum(exp(row)))` with max subtraction.
pub fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let mut max = S::neg_infinity();
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    max + sum.ln()
}

/// Shannon entropy in nats of a probability row. Zero entries contribute 0.
pub fn entropy_nats<S: Scalar>(probs: &[S]) -> f64 {
    let mut h = 0.0;
    for &p in probs {
        let p = p.to_f64().unwrap_or(0.0);
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}
