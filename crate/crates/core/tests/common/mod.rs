//! Independent oracles shared by the integration suites. These are written
//! against the definitions, not the implementations: the matmul oracle is the
//! textbook triple loop, and gradients are checked by central differences.

#![allow(dead_code)]

use growbrain_core::numerics::Matrix;

/// Textbook i-j-k matrix multiply with a scalar accumulator, ascending k.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Central finite difference of a scalar function at x.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with a guard for near-zero denominators.
pub fn rel_err(a: f64, b: f64, guard: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(guard)
}
