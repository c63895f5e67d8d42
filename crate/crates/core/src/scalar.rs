//! Floating-point element types the engine can run on.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element type of a [`Tensor`](crate::Tensor): `f32` or `f64`.
///
/// Besides the arithmetic bounds this carries the two primitives that need a
/// per-type implementation: a dense matrix multiply and the error function.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c = a · b` for strided matrices, `a` is m×k, `b` is k×n, `c` is m×n.
    /// `c` is overwritten.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn error_fn(self) -> Self;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn from_f32_value(v: f32) -> Self {
        Self::from_f32(v).expect("f32 value representable")
    }
}

fn check_extent<T>(buf: &[T], rows: usize, cols: usize, strides: (isize, isize), what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * strides.0 + (cols - 1) as isize * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < buf.len(),
        "gemm: {what} buffer of length {} too short for {rows}x{cols} with strides {strides:?}",
        buf.len()
    );
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_strides: (isize, isize),
        b: &[f32],
        b_strides: (isize, isize),
        c: &mut [f32],
        c_strides: (isize, isize),
    ) {
        check_extent(a, m, k, a_strides, "lhs");
        check_extent(b, k, n, b_strides, "rhs");
        check_extent(c, m, n, c_strides, "output");
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: extents checked above against the buffer lengths.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                0.0,
                c.as_mut_ptr(),
                c_strides.0,
                c_strides.1,
            );
        }
    }

    fn error_fn(self) -> f32 {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_strides: (isize, isize),
        b: &[f64],
        b_strides: (isize, isize),
        c: &mut [f64],
        c_strides: (isize, isize),
    ) {
        check_extent(a, m, k, a_strides, "lhs");
        check_extent(b, k, n, b_strides, "rhs");
        check_extent(c, m, n, c_strides, "output");
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: extents checked above against the buffer lengths.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                0.0,
                c.as_mut_ptr(),
                c_strides.0,
                c_strides.1,
            );
        }
    }

    fn error_fn(self) -> f64 {
        libm::erf(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        f64::gemm(
            m,
            k,
            n,
            &a,
            (k as isize, 1),
            &b,
            (n as isize, 1),
            &mut c,
            (n as isize, 1),
        );
        for (x, y) in c.iter().zip(naive(m, k, n, &a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposed_rhs_strides() {
        let (m, k, n) = (2, 3, 4);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32).collect();
        // b stored as n×k, read as k×n
        let bt: Vec<f32> = (0..n * k).map(|i| (i % 5) as f32).collect();
        let mut c = vec![0.0f32; m * n];
        f32::gemm(
            m,
            k,
            n,
            &a,
            (k as isize, 1),
            &bt,
            (1, k as isize),
            &mut c,
            (n as isize, 1),
        );
        for i in 0..m {
            for j in 0..n {
                let want: f32 = (0..k).map(|p| a[i * k + p] * bt[j * k + p]).sum();
                assert_eq!(c[i * n + j], want);
            }
        }
    }

    #[test]
    fn erf_reference_points() {
        assert_eq!(0.0f64.error_fn(), 0.0);
        assert!((1.0f64.error_fn() - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((1.0f32.error_fn() - 0.842_700_8).abs() < 1e-6);
    }
}
