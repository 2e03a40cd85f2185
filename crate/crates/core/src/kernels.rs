//! Shared numeric kernels.
//!
//! Both the tape ops and the plain (untaped) model evaluations call these,
//! so a value computed either way is bit-identical. Keep kernel arithmetic
//! order fixed: run-to-run determinism depends on it.

/// out[i] = dot(a[i*k .. i*k+k], b)   (a is row-major [m, k], b is [k])
pub fn matvec(a: &[f64], b: &[f64], m: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k);
    debug_assert_eq!(out.len(), m);
    for i in 0..m {
        out[i] = dot(&a[i * k..i * k + k], b);
    }
}

/// Four-accumulator dot product; fixed association order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

/// C[m,n] = A[m,k] @ B[k,n], row-major, ikj order.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let row_out = &mut out[i * n..i * n + n];
        for p in 0..k {
            let aip = a[i * k + p];
            let row_b = &b[p * n..p * n + n];
            for j in 0..n {
                row_out[j] += aip * row_b[j];
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Stable log-sum-exp of a slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax probabilities (stable), written into `out`.
pub fn softmax(xs: &[f64], out: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        let e = (x - m).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}
