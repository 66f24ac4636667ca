//! Arithmetic over non-negative reals, in native floating point or in the
//! log domain. The grounded-Laplacian elimination only ever adds, multiplies
//! and divides non-negative quantities, so it can run on either
//! representation.

/// Smallest pivot accepted by the native path before falling back.
const NATIVE_PIVOT_FLOOR: f64 = 1e-280;

pub(crate) trait Positive: Copy {
    const ZERO: Self;
    fn from_ln(x: f64) -> Self;
    fn ln(self) -> f64;
    fn add(self, other: Self) -> Self;
    fn mul(self, other: Self) -> Self;
    fn div(self, other: Self) -> Self;
    /// Whether a pivot is usable in this representation.
    fn usable_pivot(self) -> bool;
}

impl Positive for f64 {
    const ZERO: Self = 0.0;

    #[inline]
    fn from_ln(x: f64) -> Self {
        x.exp()
    }
    #[inline]
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    #[inline]
    fn add(self, other: Self) -> Self {
        self + other
    }
    #[inline]
    fn mul(self, other: Self) -> Self {
        self * other
    }
    #[inline]
    fn div(self, other: Self) -> Self {
        self / other
    }
    #[inline]
    fn usable_pivot(self) -> bool {
        self.is_finite() && self > NATIVE_PIVOT_FLOOR
    }
}

/// A non-negative number stored as its natural logarithm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct LogNum(pub f64);

impl Positive for LogNum {
    const ZERO: Self = LogNum(f64::NEG_INFINITY);

    #[inline]
    fn from_ln(x: f64) -> Self {
        LogNum(x)
    }
    #[inline]
    fn ln(self) -> f64 {
        self.0
    }
    #[inline]
    fn add(self, other: Self) -> Self {
        LogNum(log_add_exp(self.0, other.0))
    }
    #[inline]
    fn mul(self, other: Self) -> Self {
        LogNum(self.0 + other.0)
    }
    #[inline]
    fn div(self, other: Self) -> Self {
        LogNum(self.0 - other.0)
    }
    #[inline]
    fn usable_pivot(self) -> bool {
        self.0.is_finite()
    }
}

#[inline]
pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
