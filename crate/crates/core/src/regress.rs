//! Least-squares polynomial regression in one standardized variable and a
//! tridiagonal solver.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Polynomial in the standardized variable `(x - center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolyFit<T> {
    pub center: T,
    pub scale: T,
    pub coef: Vec<T>,
}

impl<T: Real> PolyFit<T> {
    pub fn constant(c: T) -> Self {
        Self { center: T::zero(), scale: T::one(), coef: vec![c] }
    }

    #[inline]
    pub fn eval(&self, x: T) -> T {
        let z = (x - self.center) / self.scale;
        self.coef.iter().rev().fold(T::zero(), |acc, &c| acc * z + c)
    }

    /// Derivative with respect to the raw variable `x`.
    pub fn derivative(&self, x: T) -> T {
        let z = (x - self.center) / self.scale;
        let mut acc = T::zero();
        for (k, &c) in self.coef.iter().enumerate().skip(1).rev() {
            acc = acc * z + c * T::from_count(k);
        }
        acc / self.scale
    }

    pub fn degree(&self) -> usize {
        self.coef.len().saturating_sub(1)
    }
}

/// Weighted least-squares projection onto `{1, z, ..., z^d}` with a
/// pre-factored normal matrix, so several responses can share one basis.
#[derive(Debug, Clone)]
pub struct Regressor<'a, T> {
    xs: &'a [T],
    weights: Option<&'a [T]>,
    center: T,
    scale: T,
    degree: usize,
    chol: Vec<T>,
}

impl<'a, T: Real> Regressor<'a, T> {
    /// Builds the regressor. When the regressor has no spread the degree
    /// collapses to 0, i.e. a (weighted) sample mean.
    pub fn new(xs: &'a [T], weights: Option<&'a [T]>, degree: usize, step: usize) -> Result<Self> {
        let n = xs.len();
        if n == 0 {
            return Err(Error::Argument("regression on an empty sample".into()));
        }
        if let Some(w) = weights {
            if w.len() != n {
                return Err(Error::Argument("weights length differs from sample".into()));
            }
        }
        let (center, scale) = standardize(xs);
        let degree = if scale > T::zero() { degree } else { 0 };
        let scale = if scale > T::zero() { scale } else { T::one() };
        if n <= degree {
            return Err(Error::SingularRegression {
                step,
                detail: format!("{n} observations for a degree-{degree} basis"),
            });
        }
        let m = degree + 1;
        let mut gram = vec![T::zero(); m * m];
        let mut pows = vec![T::zero(); 2 * degree + 1];
        let mut moments = vec![T::zero(); 2 * degree + 1];
        for (p, &x) in xs.iter().enumerate() {
            let w = weights.map_or(T::one(), |w| w[p]);
            let z = (x - center) / scale;
            let mut acc = w;
            for q in pows.iter_mut() {
                *q = acc;
                acc *= z;
            }
            for (mo, &q) in moments.iter_mut().zip(pows.iter()) {
                *mo += q;
            }
        }
        for r in 0..m {
            for c in 0..m {
                gram[r * m + c] = moments[r + c];
            }
        }
        let chol = cholesky(&gram, m).ok_or_else(|| Error::SingularRegression {
            step,
            detail: format!("normal matrix of degree-{degree} basis is not positive definite (center {center}, scale {scale})"),
        })?;
        Ok(Self { xs, weights, center, scale, degree, chol })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Projects `ys` onto the basis.
    pub fn fit(&self, ys: &[T]) -> PolyFit<T> {
        let m = self.degree + 1;
        let mut rhs = vec![T::zero(); m];
        for (p, (&x, &y)) in self.xs.iter().zip(ys).enumerate() {
            let w = self.weights.map_or(T::one(), |w| w[p]);
            let z = (x - self.center) / self.scale;
            let mut acc = w * y;
            for r in rhs.iter_mut() {
                *r += acc;
                acc *= z;
            }
        }
        let coef = cholesky_solve(&self.chol, m, rhs);
        PolyFit { center: self.center, scale: self.scale, coef }
    }
}

fn standardize<T: Real>(xs: &[T]) -> (T, T) {
    let n = T::from_count(xs.len());
    let c = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - c) * (x - c)).sum::<T>() / n;
    let sd = var.sqrt();
    // Spread at the rounding level of the center carries no information.
    let floor = T::epsilon() * T::lit(1e3) * (T::one() + c.abs());
    (c, if sd > floor { sd } else { T::zero() })
}

fn cholesky<T: Real>(a: &[T], m: usize) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); m * m];
    let tiny = T::epsilon() * T::lit(1e3);
    for i in 0..m {
        for j in 0..=i {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= l[i * m + k] * l[j * m + k];
            }
            if i == j {
                if !(s > tiny * a[i * m + i].abs()) {
                    return None;
                }
                l[i * m + i] = s.sqrt();
            } else {
                l[i * m + j] = s / l[j * m + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve<T: Real>(l: &[T], m: usize, mut b: Vec<T>) -> Vec<T> {
    for i in 0..m {
        for k in 0..i {
            b[i] = b[i] - l[i * m + k] * b[k];
        }
        b[i] /= l[i * m + i];
    }
    for i in (0..m).rev() {
        for k in i + 1..m {
            b[i] = b[i] - l[k * m + i] * b[k];
        }
        b[i] /= l[i * m + i];
    }
    b
}

/// Solves a tridiagonal system with the Thomas algorithm. `lower[0]` and
/// `upper[m - 1]` are ignored.
pub fn solve_tridiagonal<T: Real>(lower: &[T], diag: &[T], upper: &[T], rhs: &[T]) -> Vec<T> {
    let m = diag.len();
    let mut c = vec![T::zero(); m];
    let mut d = vec![T::zero(); m];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..m {
        let denom = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < m { upper[i] / denom } else { T::zero() };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    let mut x = vec![T::zero(); m];
    x[m - 1] = d[m - 1];
    for i in (0..m - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}
