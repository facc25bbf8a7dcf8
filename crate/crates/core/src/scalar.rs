//! Scalar traits shared by every numerical routine in the crate.
//!
//! [`Field`] is the minimal arithmetic needed by the closed-form constant
//! tables and pointwise strategy maps; it is implemented for `f32`, `f64` and
//! exact rationals such as `num_rational::Rational64`. [`Real`] adds the
//! transcendental functions the Monte Carlo and PDE solvers need.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, Num, NumAssign, Signed};

/// Ordered field arithmetic: enough for the constant tables and the
/// best-response maps, exact when instantiated with rationals.
pub trait Field:
    Num + NumAssign + Signed + Clone + PartialOrd + FromPrimitive + Debug + Send + Sync + 'static
{
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("agent count representable in scalar type")
    }
}

impl<T> Field for T where
    T: Num + NumAssign + Signed + Clone + PartialOrd + FromPrimitive + Debug + Send + Sync + 'static
{
}

/// Floating point scalar used by the simulation and BSDE solvers.
pub trait Real: Field + Float + Copy + Display + Default + Sum {
    /// Converts an `f64` literal. Every literal used in the crate is
    /// representable in both `f32` and `f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl<T> Real for T where T: Field + Float + Copy + Display + Default + Sum {}

/// Arithmetic mean of a slice. Returns zero for an empty slice.
pub fn mean<T: Field>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    let mut acc = T::zero();
    for x in xs {
        acc += x.clone();
    }
    acc / T::from_count(xs.len())
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se<T: Real>(xs: &[T]) -> (T, T) {
    let n = xs.len();
    if n == 0 {
        return (T::nan(), T::nan());
    }
    let m = xs.iter().copied().sum::<T>() / T::from_count(n);
    if n < 2 {
        return (m, T::zero());
    }
    let ss: T = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    let var = ss / T::from_count(n - 1);
    (m, (var / T::from_count(n)).sqrt())
}

/// Empirical quantile by linear interpolation between order statistics.
pub fn quantile<T: Real>(sorted: &[T], q: f64) -> T {
    match sorted.len() {
        0 => T::nan(),
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let w = T::lit(pos - lo as f64);
            sorted[lo] + (sorted[hi] - sorted[lo]) * w
        }
    }
}

/// Sorts a copy of `xs`, treating NaN as larger than everything.
pub fn sorted_copy<T: Real>(xs: &[T]) -> Vec<T> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Greater));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Rational64;

    #[test]
    fn rational_mean_is_exact() {
        let xs = [Rational64::new(1, 3), Rational64::new(1, 6)];
        assert_eq!(mean(&xs), Rational64::new(1, 4));
    }

    #[test]
    fn se_of_constant_sample_is_zero() {
        let (m, se) = mean_and_se(&[2.0f64; 10]);
        assert_eq!(m, 2.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn quantile_interpolates() {
        let s = [0.0f64, 1.0, 2.0, 3.0];
        assert_eq!(quantile(&s, 0.5), 1.5);
        assert_eq!(quantile(&s, 0.0), 0.0);
        assert_eq!(quantile(&s, 1.0), 3.0);
    }
}
