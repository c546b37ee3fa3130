//! Scalar abstraction over the two supported precisions.
//!
//! Tests and gradient checks run at f64; training may run at f32 for speed
//! (selected in the harness config). The matmul kernel dispatches to
//! `matrixmultiply`'s sgemm/dgemm.

use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// c = alpha * op(a) * op(b) + beta * c, row-major, with optional logical
    /// transposes applied via strides (no materialized copies).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: Self,
        c: &mut [Self],
    );
}

// (row stride, col stride) of the logical matrix, given the column count of
// the row-major storage and whether the logical view transposes it.
macro_rules! strides {
    ($transposed:expr, $storage_cols:expr) => {
        if $transposed {
            (1isize, $storage_cols as isize)
        } else {
            ($storage_cols as isize, 1isize)
        }
    };
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let (rsa, csa) = strides!(ta, if ta { m } else { k });
        let (rsb, csb) = strides!(tb, if tb { k } else { n });
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let (rsa, csa) = strides!(ta, if ta { m } else { k });
        let (rsb, csb) = strides!(tb, if tb { k } else { n });
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_plain_and_transposed() {
        // a = [[1,2],[3,4]] (2x2), b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);

        // a^T * b with a stored as 2x2: rows of a^T are columns of a.
        let mut c2 = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, true, &b, false, 0.0, &mut c2);
        assert_eq!(c2, [26.0, 30.0, 38.0, 44.0]);

        // a * b^T
        let mut c3 = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, false, &b, true, 0.0, &mut c3);
        assert_eq!(c3, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = [1.0f32, 0.0, 0.0, 1.0];
        let b = [2.0f32, 0.0, 0.0, 2.0];
        let mut c = [10.0f32; 4];
        f32::gemm(2, 2, 2, 1.0, &a, false, &b, false, 1.0, &mut c);
        assert_eq!(c, [12.0, 10.0, 10.0, 12.0]);
    }
}
