//! Slice-level numeric kernels shared by the tape primitives and the
//! eager single-step decode path.

use super::Element;

pub const NORM_EPS: f64 = 1e-5;

pub fn all_finite<T: Element>(xs: &[T]) -> bool {
    xs.iter().all(|v| v.is_finite())
}

pub fn max_abs_diff<T: Element>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y).abs().as_f64()).fold(0.0, f64::max)
}

/// `max|a - b| / max|b|` (0 when both are identically zero).
pub fn max_rel_diff<T: Element>(a: &[T], reference: &[T]) -> f64 {
    let scale = reference.iter().map(|v| v.abs().as_f64()).fold(0.0, f64::max);
    let diff = max_abs_diff(a, reference);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// `out (+)= op(a)·op(b)` with `op(a)` of shape `m×k` and `op(b)` of shape `k×n`.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored `k×n`
/// (or `n×k` when `trans_b`); `out` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm lhs");
    assert_eq!(b.len(), k * n, "gemm rhs");
    assert_eq!(out.len(), m * n, "gemm out");
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths checked above match the strided views.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(a, false, b, false, &mut out, m, k, n, false);
    out
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `x·σ(x)`, also known as Swish with unit slope.
pub fn silu<T: Element>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Element>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Element>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else if x < T::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// `(e^z - 1) / z`, evaluated by its series near zero.
pub fn phi<T: Element>(z: T) -> T {
    phi_with(z, z.exp_m1())
}

/// `e^z − 1` from `exp` away from zero and a degree-9 Taylor polynomial
/// below `|z| < 0.1`; within a few ulp of `exp_m1` and much cheaper in the
/// scan's inner loop.
#[inline]
pub fn expm1_fast<T: Element>(z: T) -> T {
    let e = z.exp() - T::one();
    let c = |k: f64| T::of(1.0 / k);
    let x = z.max(T::of(-0.1)).min(T::of(0.1));
    let p = x
        * (T::one()
            + x * (c(2.0)
                + x * (c(6.0)
                    + x * (c(24.0)
                        + x * (c(120.0) + x * (c(720.0) + x * (c(5040.0) + x * (c(40320.0) + x * c(362880.0)))))))));
    // Branch-free select; both products are exact.
    let near = T::of(f64::from(u8::from(z.abs() < T::of(0.1))));
    p * near + e * (T::one() - near)
}

/// [`phi`] given a precomputed `expm1(z)`.
#[inline]
pub fn phi_with<T: Element>(z: T, em1: T) -> T {
    if z.abs() < T::of(1e-6) {
        T::one() + z / T::of(2.0) + z * z / T::of(6.0)
    } else {
        em1 / z
    }
}

/// Derivative of [`phi`].
pub fn phi_grad<T: Element>(z: T) -> T {
    phi_grad_with(z, z.exp_m1())
}

/// [`phi_grad`] given a precomputed `expm1(z)`.
#[inline]
pub fn phi_grad_with<T: Element>(z: T, em1: T) -> T {
    if z.abs() < T::of(1e-2) {
        // Σ_{k≥1} k·z^(k-1) / (k+1)!
        T::of(0.5) + z * (T::of(1.0 / 3.0) + z * (T::of(0.125) + z * (T::of(1.0 / 30.0) + z / T::of(144.0))))
    } else {
        (z * (em1 + T::one()) - em1) / (z * z)
    }
}

/// Row-wise normalization to zero mean / unit variance; returns the
/// per-row inverse standard deviations.
pub fn layer_norm_rows<T: Element>(x: &[T], d: usize, out: &mut [T]) -> Vec<T> {
    let eps = T::of(NORM_EPS);
    let dn = T::of(d as f64);
    let mut inv = Vec::with_capacity(x.len() / d);
    for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + eps).sqrt();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        inv.push(r);
    }
    inv
}

/// Row-wise `x / sqrt(mean(x²) + eps)`; returns inverse RMS per row.
pub fn rms_norm_rows<T: Element>(x: &[T], d: usize, out: &mut [T]) -> Vec<T> {
    let eps = T::of(NORM_EPS);
    let dn = T::of(d as f64);
    let mut inv = Vec::with_capacity(x.len() / d);
    for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
        let r = T::one() / (ms + eps).sqrt();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v * r;
        }
        inv.push(r);
    }
    inv
}

pub fn softmax_rows<T: Element>(x: &[T], d: usize, out: &mut [T]) {
    for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
}

/// `log Σ exp(row)`, stabilized.
pub fn logsumexp<T: Element>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Causal depthwise convolution over `[batch, time, channels]` with kernel
/// `[channels, k]`: `y[t,c] = bias[c] + Σ_j w[c,j]·x[t-(k-1)+j, c]`, zero
/// left padding.
pub fn conv1d_causal<T: Element>(
    x: &[T],
    batch: usize,
    time: usize,
    channels: usize,
    w: &[T],
    k: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        let base = b * time * channels;
        for t in 0..time {
            let yrow = &mut y[base + t * channels..base + (t + 1) * channels];
            if let Some(bias) = bias {
                yrow.copy_from_slice(bias);
            }
            for j in 0..k {
                let src = t as isize - (k as isize - 1) + j as isize;
                if src < 0 {
                    continue;
                }
                let xrow = &x[base + src as usize * channels..base + (src as usize + 1) * channels];
                for c in 0..channels {
                    yrow[c] += w[c * k + j] * xrow[c];
                }
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm1_fast_tracks_libm() {
        let mut worst64 = 0.0f64;
        let mut worst32 = 0.0f64;
        for i in 0..200_000 {
            let z = -20.0 * (i as f64 / 200_000.0).powi(3) + 1e-9 * (i % 7) as f64;
            let z = if i % 2 == 0 { z } else { -z / 10.0 };
            if z == 0.0 {
                continue;
            }
            let want = z.exp_m1();
            worst64 = worst64.max(((expm1_fast(z) - want) / want).abs());
            let zf = z as f32;
            let wf = (zf as f64).exp_m1();
            worst32 = worst32.max(((expm1_fast(zf) as f64 - wf) / wf).abs());
        }
        assert!(worst64 < 1e-14, "{worst64}");
        assert!(worst32 < 1e-6, "{worst32}");
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0f64), 0.0);
        // 1·σ(1) = 1 / (1 + e^-1)
        assert!((silu(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn phi_series_matches_exact_near_threshold() {
        let z = 1e-5f64;
        let exact = z.exp_m1() / z;
        let series = 1.0 + z / 2.0 + z * z / 6.0;
        assert!(((series - exact) / exact).abs() < 1e-9);
        assert!((phi(1e-7f64) - (1.0 + 0.5e-7)).abs() < 1e-14);
        assert!((phi_grad(1e-4f64) - 0.5).abs() < 1e-4);
    }

    #[test]
    fn phi_grad_matches_finite_difference() {
        for &z in &[-3.0f64, -0.5, -2e-3, -5e-4, 0.0, 5e-4, 0.7] {
            let h = 1e-6;
            let fd = (phi(z + h) - phi(z - h)) / (2.0 * h);
            assert!((phi_grad(z) - fd).abs() < 1e-7, "z={z}");
        }
    }

    #[test]
    fn softplus_roundtrip() {
        for &y in &[1e-3, 1e-2, 0.1, 1.0, 5.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        gemm(&a, true, &b, false, &mut out, 2, 2, 2, false);
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
        gemm(&a, false, &b, true, &mut out, 2, 2, 2, false);
        assert_eq!(out, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_is_causal_with_zero_padding() {
        // one channel, kernel [1, 10]: y_t = x_{t-1} + 10 x_t
        let x = [1.0f64, 2.0, 3.0];
        let y = conv1d_causal(&x, 1, 3, 1, &[1.0, 10.0], 2, None);
        assert_eq!(y, vec![10.0, 21.0, 32.0]);
    }
}
