//! Row-major dense kernels. Weights are stored `in × out`, so a projection is
//! `y = x · W` and the inner loops are contiguous `axpy`s.

use super::Real;

/// Dot product with eight independent accumulators (fixed summation order).
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] = acc[j] + x[j] * y[j];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `out[rows×cols] += x[rows×inner] · w[inner×cols]`
pub fn matmul_acc<F: Real>(
    x: &[F],
    rows: usize,
    inner: usize,
    w: &[F],
    cols: usize,
    out: &mut [F],
) {
    debug_assert_eq!(x.len(), rows * inner);
    debug_assert_eq!(w.len(), inner * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        let xr = &x[r * inner..(r + 1) * inner];
        let orow = &mut out[r * cols..(r + 1) * cols];
        for (k, &xk) in xr.iter().enumerate() {
            if xk != F::zero() {
                axpy(xk, &w[k * cols..(k + 1) * cols], orow);
            }
        }
    }
}

pub fn matmul<F: Real>(x: &[F], rows: usize, inner: usize, w: &[F], cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    matmul_acc(x, rows, inner, w, cols, &mut out);
    out
}

/// Backward of `y = x · w`: accumulates `dw += xᵀ·dy` and, when requested,
/// `dx += dy·wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<F: Real>(
    x: &[F],
    rows: usize,
    inner: usize,
    w: &[F],
    cols: usize,
    dy: &[F],
    dx: Option<&mut [F]>,
    dw: &mut [F],
) {
    debug_assert_eq!(dy.len(), rows * cols);
    for r in 0..rows {
        let xr = &x[r * inner..(r + 1) * inner];
        let dyr = &dy[r * cols..(r + 1) * cols];
        for (k, &xk) in xr.iter().enumerate() {
            if xk != F::zero() {
                axpy(xk, dyr, &mut dw[k * cols..(k + 1) * cols]);
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let dyr = &dy[r * cols..(r + 1) * cols];
            let dxr = &mut dx[r * inner..(r + 1) * inner];
            for (k, dxk) in dxr.iter_mut().enumerate() {
                *dxk = *dxk + dot(dyr, &w[k * cols..(k + 1) * cols]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..19).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] · [1 0 1; 0 1 1]
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        assert_eq!(matmul(&x, 2, 2, &w, 3), vec![1.0, 2.0, 3.0, 3.0, 4.0, 7.0]);
    }

    #[test]
    fn matmul_backward_matches_definition() {
        let x = [1.0, -2.0, 0.5, 3.0];
        let w = [0.1, 0.2, 0.3, -0.4, 0.5, 0.6];
        let dy = [1.0, 0.0, -1.0, 2.0, 1.0, 0.5];
        let mut dx = [0.0; 4];
        let mut dw = [0.0; 6];
        matmul_backward(&x, 2, 2, &w, 3, &dy, Some(&mut dx), &mut dw);
        for r in 0..2 {
            for k in 0..2 {
                let want: f64 = (0..3).map(|c| dy[r * 3 + c] * w[k * 3 + c]).sum();
                assert!((dx[r * 2 + k] - want).abs() < 1e-12);
            }
        }
        for k in 0..2 {
            for c in 0..3 {
                let want: f64 = (0..2).map(|r| x[r * 2 + k] * dy[r * 3 + c]).sum();
                assert!((dw[k * 3 + c] - want).abs() < 1e-12);
            }
        }
    }
}
