//! Element-type abstraction: the whole stack is generic over `Scalar` so
//! training runs in f32 while oracle and gradient-check tests instantiate
//! the identical code in f64.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("scalar to f64")
    }

    /// Fast exponential used in the discretization/scan inner loops, where
    /// exp dominates the flop budget. Must stay within ~1.5e-7 relative of
    /// the true value for f32; f64 uses the libm exponential unchanged.
    fn exp_fast(self) -> Self;

    /// exp(x) - 1 without cancellation near zero. The zero-order-hold input
    /// matrix divides this by a small argument, so the plain `exp - 1` form
    /// would amplify rounding by 1/|x|.
    fn exp_m1_fast(self) -> Self;

    /// Strided C := alpha*A*B + beta*C.
    ///
    /// # Safety
    /// Pointers must be valid for the given dims/strides (see matrixmultiply).
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    #[inline]
    fn exp_fast(self) -> Self {
        exp_f32(self)
    }

    #[inline]
    fn exp_m1_fast(self) -> Self {
        exp_m1_f32(self)
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    #[inline]
    fn exp_fast(self) -> Self {
        self.exp()
    }

    #[inline]
    fn exp_m1_fast(self) -> Self {
        self.exp_m1()
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Cephes-style expf: 2^k * p(r) with x = k*ln2 + r, |r| <= ln2/2.
/// Inlineable (unlike the libm call) so the hot lane loops vectorize.
#[inline]
fn exp_f32(x: f32) -> f32 {
    if x < -87.0 {
        return 0.0;
    }
    if x > 88.0 {
        return f32::INFINITY;
    }
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    // Cody-Waite split of ln 2; the hi part's low mantissa bits are zero so
    // k * LN2_HI is exact. The digits are load-bearing.
    #[allow(clippy::excessive_precision)]
    const LN2_HI: f32 = 0.693_359_375;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let k = (x * LOG2E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Degree-7 Taylor on |r| <= 0.3466; tail error ~5e-9, rounding ~1 ulp.
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0)))))));
    let two_k = f32::from_bits((((k as i32) + 127) as u32) << 23);
    two_k * p
}

/// expm1 via the series of expm1(x)/x near zero; |x| < 0.35 keeps the
/// degree-7 tail below 2e-8 relative. Larger arguments lose nothing to
/// cancellation, so exp - 1 suffices there.
#[inline]
fn exp_m1_f32(x: f32) -> f32 {
    if x.abs() < 0.35 {
        x * (1.0
            + x * (0.5
                + x * (1.0 / 6.0
                    + x * (1.0 / 24.0
                        + x * (1.0 / 120.0 + x * (1.0 / 720.0 + x * (1.0 / 5040.0)))))))
    } else {
        exp_f32(x) - 1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_f32_matches_libm() {
        let mut worst = 0.0f64;
        let mut x = -87.0f64;
        while x < 30.0 {
            let got = exp_f32(x as f32) as f64;
            let want = x.exp();
            let rel = ((got - want) / want).abs();
            worst = worst.max(rel);
            x += 0.001953125;
        }
        assert!(worst < 3e-7, "worst relative error {worst}");
    }

    #[test]
    fn exp_f32_underflow_and_zero() {
        assert_eq!(exp_f32(-200.0), 0.0);
        assert_eq!(exp_f32(0.0), 1.0);
    }

    #[test]
    fn exp_m1_f32_has_no_small_argument_blowup() {
        let mut worst = 0.0f64;
        let mut x = -5.0f64;
        while x < 5.0 {
            if x.abs() > 1e-12 {
                let got = exp_m1_f32(x as f32) as f64;
                let want = x.exp_m1();
                worst = worst.max(((got - want) / want).abs());
            }
            x += 0.0009765625;
        }
        assert!(worst < 3e-7, "worst relative error {worst}");
        assert_eq!(exp_m1_f32(0.0), 0.0);
        // Tiny arguments reduce to x itself, no cancellation to zero.
        assert_eq!(exp_m1_f32(1e-20), 1e-20);
    }
}
