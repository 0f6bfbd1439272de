//! Inner loops shared by every layer.
//!
//! Summation order is fixed (four interleaved partial sums, then the tail), so
//! results do not depend on how many rows are batched together.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ta.iter().zip(tb) {
        s += x * y;
    }
    s
}

/// `y += a0·x0; y += a1·x1; y += a2·x2; y += a3·x3`, applied in that order
/// per element, so the result is bit-identical to four [`axpy`] calls.
#[inline]
pub fn axpy4(y: &mut [f64], a: [f64; 4], x: [&[f64]; 4]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for i in 0..n {
        let mut v = y[i];
        v += a[0] * x0[i];
        v += a[1] * x1[i];
        v += a[2] * x2[i];
        v += a[3] * x3[i];
        y[i] = v;
    }
}


/// Four dot products of `x` against `w0..w3` in one pass over `x`.
///
/// Each result is bit-identical to [`dot`] on the same pair.
#[inline]
pub fn dot4(x: &[f64], w: [&[f64]; 4]) -> [f64; 4] {
    let n = x.len();
    let full = n - n % 4;
    let mut acc = [[0.0f64; 4]; 4];
    let mut i = 0;
    while i < full {
        let xs = &x[i..i + 4];
        for (a, wk) in acc.iter_mut().zip(&w) {
            let ws = &wk[i..i + 4];
            a[0] += xs[0] * ws[0];
            a[1] += xs[1] * ws[1];
            a[2] += xs[2] * ws[2];
            a[3] += xs[3] * ws[3];
        }
        i += 4;
    }
    let mut out = [0.0; 4];
    for k in 0..4 {
        let a = acc[k];
        let mut s = (a[0] + a[1]) + (a[2] + a[3]);
        for j in full..n {
            s += x[j] * w[k][j];
        }
        out[k] = s;
    }
    out
}

/// `y += a · x`
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
