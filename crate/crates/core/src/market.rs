//! Market coefficient models, validation and Brownian path generation.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Uniform time grid on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid<T> {
    pub horizon: T,
    pub n_steps: usize,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(horizon: T, n_steps: usize) -> Result<Self> {
        let g = Self { horizon, n_steps };
        g.check()?;
        Ok(g)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.horizon > T::zero()) || !self.horizon.is_finite() {
            return Err(Error::Argument(format!("horizon must be positive and finite, got {}", self.horizon)));
        }
        if self.n_steps == 0 {
            return Err(Error::Argument("n_steps must be at least 1".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn dt(&self) -> T {
        self.horizon / T::from_count(self.n_steps)
    }

    /// Grid point `t_i`; the last point is the horizon exactly.
    #[inline]
    pub fn t(&self, i: usize) -> T {
        if i >= self.n_steps {
            self.horizon
        } else {
            self.horizon * T::from_count(i) / T::from_count(self.n_steps)
        }
    }

    pub fn times(&self) -> Vec<T> {
        (0..=self.n_steps).map(|i| self.t(i)).collect()
    }

    /// Index of the grid point nearest to `t`, clamped to the grid.
    pub fn nearest_step(&self, t: T) -> usize {
        let x = (t / self.dt()).round();
        if !(x > T::zero()) {
            0
        } else {
            x.to_usize().unwrap_or(self.n_steps).min(self.n_steps)
        }
    }
}

/// Bounded map from the factor value to a coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientMap<T> {
    Constant { value: T },
    /// `clamp(intercept + slope * F, lo, hi)`.
    ClampedAffine { intercept: T, slope: T, lo: T, hi: T },
    /// Piecewise-linear interpolation through `(knots, values)`, flat outside.
    Tabulated { knots: Vec<T>, values: Vec<T> },
}

impl<T: Real> CoefficientMap<T> {
    pub fn eval(&self, f: T) -> T {
        match self {
            Self::Constant { value } => *value,
            Self::ClampedAffine { intercept, slope, lo, hi } => (*intercept + *slope * f).max(*lo).min(*hi),
            Self::Tabulated { knots, values } => {
                if f <= knots[0] {
                    return values[0];
                }
                let last = knots.len() - 1;
                if f >= knots[last] {
                    return values[last];
                }
                let k = knots.partition_point(|&x| x <= f);
                let (x0, x1) = (knots[k - 1], knots[k]);
                let w = (f - x0) / (x1 - x0);
                values[k - 1] + (values[k] - values[k - 1]) * w
            }
        }
    }

    /// Declared range `[lo, hi]` of the map.
    pub fn bounds(&self) -> (T, T) {
        match self {
            Self::Constant { value } => (*value, *value),
            Self::ClampedAffine { intercept, slope, lo, hi } => {
                if *slope == T::zero() {
                    let v = intercept.max(*lo).min(*hi);
                    (v, v)
                } else {
                    (*lo, *hi)
                }
            }
            Self::Tabulated { values, .. } => values
                .iter()
                .fold((T::infinity(), T::neg_infinity()), |(a, b), &v| (a.min(v), b.max(v))),
        }
    }

    pub fn is_constant(&self) -> bool {
        let (lo, hi) = self.bounds();
        lo == hi
    }

    fn check_structure(&self, name: &str) -> Result<()> {
        match self {
            Self::Constant { .. } => Ok(()),
            Self::ClampedAffine { lo, hi, .. } => {
                if lo > hi {
                    Err(Error::Structural(format!("{name}: clamp interval [{lo}, {hi}] is empty")))
                } else {
                    Ok(())
                }
            }
            Self::Tabulated { knots, values } => {
                if knots.is_empty() || knots.len() != values.len() {
                    return Err(Error::Structural(format!(
                        "{name}: {} knots for {} values",
                        knots.len(),
                        values.len()
                    )));
                }
                if knots.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::Structural(format!("{name}: knots must be strictly increasing")));
                }
                Ok(())
            }
        }
    }
}

/// Piecewise-constant function of time: `values[k]` on `[breaks[k], breaks[k+1])`,
/// the last value extending to the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiecewiseConstant<T> {
    pub breaks: Vec<T>,
    pub values: Vec<T>,
}

impl<T: Real> PiecewiseConstant<T> {
    pub fn constant(v: T) -> Self {
        Self { breaks: vec![T::zero()], values: vec![v] }
    }

    pub fn eval(&self, t: T) -> T {
        let k = self.breaks.partition_point(|&b| b <= t);
        self.values[k.max(1) - 1]
    }

    fn bounds(&self) -> (T, T) {
        self.values
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(a, b), &v| (a.min(v), b.max(v)))
    }

    fn check_structure(&self, name: &str) -> Result<()> {
        if self.breaks.is_empty() || self.breaks.len() != self.values.len() {
            return Err(Error::Structural(format!(
                "{name}: {} breakpoints for {} values",
                self.breaks.len(),
                self.values.len()
            )));
        }
        if self.breaks[0] != T::zero() {
            return Err(Error::Structural(format!(
                "{name}: intervals start at {} and do not cover t = 0",
                self.breaks[0]
            )));
        }
        if self.breaks.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Structural(format!("{name}: breakpoints must be strictly increasing")));
        }
        Ok(())
    }
}

/// One-factor mean-reverting market: `dF = kappa (mean - F) dt + nu dW`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorModel<T> {
    pub kappa: T,
    pub mean: T,
    pub nu: T,
    pub f0: T,
    pub r: CoefficientMap<T>,
    pub mu: CoefficientMap<T>,
    pub sigma: CoefficientMap<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarketModel<T> {
    Constant { r: T, mu: T, sigma: T },
    Deterministic { r: PiecewiseConstant<T>, mu: PiecewiseConstant<T>, sigma: PiecewiseConstant<T> },
    Factor(FactorModel<T>),
}

/// Market coefficients and the factor value at one point of `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointState<T> {
    pub t: T,
    pub factor: T,
    pub r: T,
    pub mu: T,
    pub sigma: T,
    pub rho: T,
}

impl<T: Real> MarketModel<T> {
    pub fn constant(r: T, mu: T, sigma: T) -> Self {
        Self::Constant { r, mu, sigma }
    }

    pub fn is_factor(&self) -> bool {
        matches!(self, Self::Factor(_))
    }

    pub fn factor_model(&self) -> Option<&FactorModel<T>> {
        match self {
            Self::Factor(f) => Some(f),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Constant { .. } => "constant",
            Self::Deterministic { .. } => "deterministic",
            Self::Factor(_) => "factor",
        }
    }

    /// Initial factor value (zero for models without a factor).
    pub fn f0(&self) -> T {
        self.factor_model().map_or(T::zero(), |f| f.f0)
    }

    pub fn state(&self, t: T, factor: T) -> PointState<T> {
        let (r, mu, sigma) = match self {
            Self::Constant { r, mu, sigma } => (*r, *mu, *sigma),
            Self::Deterministic { r, mu, sigma } => (r.eval(t), mu.eval(t), sigma.eval(t)),
            Self::Factor(f) => (f.r.eval(factor), f.mu.eval(factor), f.sigma.eval(factor)),
        };
        PointState { t, factor, r, mu, sigma, rho: (mu - r) / sigma }
    }

    fn bounds(&self) -> [(T, T); 3] {
        match self {
            Self::Constant { r, mu, sigma } => [(*r, *r), (*mu, *mu), (*sigma, *sigma)],
            Self::Deterministic { r, mu, sigma } => [r.bounds(), mu.bounds(), sigma.bounds()],
            Self::Factor(f) => [f.r.bounds(), f.mu.bounds(), f.sigma.bounds()],
        }
    }

    fn rho_bounds(&self) -> (T, T) {
        match self {
            Self::Constant { r, mu, sigma } => {
                let rho = (*mu - *r) / *sigma;
                (rho, rho)
            }
            Self::Deterministic { r, mu, sigma } => {
                let mut cuts: Vec<T> = r.breaks.iter().chain(&mu.breaks).chain(&sigma.breaks).copied().collect();
                cuts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                cuts.dedup();
                cuts.iter().fold((T::infinity(), T::neg_infinity()), |(a, b), &t| {
                    let rho = self.state(t, T::zero()).rho;
                    (a.min(rho), b.max(rho))
                })
            }
            Self::Factor(_) => {
                let [(r_lo, r_hi), (mu_lo, mu_hi), (s_lo, s_hi)] = self.bounds();
                let (n_lo, n_hi) = (mu_lo - r_hi, mu_hi - r_lo);
                let lo = (n_lo / s_lo).min(n_lo / s_hi);
                let hi = (n_hi / s_lo).max(n_hi / s_hi);
                (lo, hi)
            }
        }
    }

    fn check_structure(&self) -> Result<()> {
        match self {
            Self::Constant { .. } => Ok(()),
            Self::Deterministic { r, mu, sigma } => {
                r.check_structure("r")?;
                mu.check_structure("mu")?;
                sigma.check_structure("sigma")
            }
            Self::Factor(f) => {
                f.r.check_structure("r")?;
                f.mu.check_structure("mu")?;
                f.sigma.check_structure("sigma")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport<T> {
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
    /// Range of the Sharpe ratio implied by the declared bounds.
    pub rho_range: (T, T),
}

impl<T: Real> ValidationReport<T> {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// The Sharpe ratio when it is a single known constant.
    pub fn rho(&self) -> Option<T> {
        (self.rho_range.0 == self.rho_range.1).then_some(self.rho_range.0)
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            let failed: Vec<String> =
                self.checks.iter().filter(|c| !c.passed).map(|c| format!("{}: {}", c.name, c.detail)).collect();
            Err(Error::InvalidModel(failed.join("; ")))
        }
    }
}

/// Checks boundedness and ellipticity of the declared coefficients.
///
/// Structural problems (empty clamp intervals, non-covering piecewise
/// functions) are errors; violated bounds are reported as failed checks.
pub fn validate_model<T: Real>(model: &MarketModel<T>) -> Result<ValidationReport<T>> {
    model.check_structure()?;
    let [(r_lo, r_hi), (mu_lo, mu_hi), (s_lo, s_hi)] = model.bounds();
    let finite = |a: T, b: T| a.is_finite() && b.is_finite();
    let mut checks = vec![
        Check {
            name: "sigma_lower_bound",
            passed: s_lo > T::zero(),
            detail: if s_lo > T::zero() {
                format!("sigma >= {s_lo}")
            } else {
                format!("sigma not bounded away from 0 (lower bound {s_lo})")
            },
        },
        Check { name: "sigma_upper_bound", passed: finite(s_lo, s_hi), detail: format!("sigma <= {s_hi}") },
        Check { name: "r_bounded", passed: finite(r_lo, r_hi), detail: format!("r in [{r_lo}, {r_hi}]") },
        Check { name: "mu_bounded", passed: finite(mu_lo, mu_hi), detail: format!("mu in [{mu_lo}, {mu_hi}]") },
    ];
    let rho_range = if s_lo > T::zero() { model.rho_bounds() } else { (T::nan(), T::nan()) };
    checks.push(Check {
        name: "rho_bounded",
        passed: finite(rho_range.0, rho_range.1),
        detail: format!("rho in [{}, {}]", rho_range.0, rho_range.1),
    });
    if let MarketModel::Factor(f) = model {
        let ok = f.kappa > T::zero() && f.nu >= T::zero() && finite(f.mean, f.f0) && f.nu.is_finite();
        checks.push(Check {
            name: "factor_parameters",
            passed: ok,
            detail: format!("kappa = {}, nu = {}, mean = {}, f0 = {}", f.kappa, f.nu, f.mean, f.f0),
        });
    }
    let mut warnings = Vec::new();
    if rho_range.0 == T::zero() && rho_range.1 == T::zero() {
        warnings.push("ρ ≡ 0".to_string());
    }
    Ok(ValidationReport { checks, warnings, rho_range })
}

/// Brownian increments and factor values on a path ensemble.
///
/// Coefficient values are not stored; [`MarketPaths::state`] evaluates them
/// from the model at the left point of each step.
#[derive(Debug, Clone)]
pub struct MarketPaths<T> {
    model: MarketModel<T>,
    grid: TimeGrid<T>,
    n_paths: usize,
    seed: u64,
    dw: Vec<T>,
    factor: Option<Vec<T>>,
}

/// Draws `n` standard normals from the stream reserved for path `p`.
pub fn path_normals(seed: u64, p: usize, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(p as u64);
    for z in out.iter_mut() {
        *z = rng.sample(StandardNormal);
    }
}

/// Generates paths. Each path draws from its own counter-based stream, so
/// results do not depend on the number of worker threads.
pub fn simulate_paths<T: Real>(
    model: &MarketModel<T>,
    grid: TimeGrid<T>,
    n_paths: usize,
    seed: u64,
) -> Result<MarketPaths<T>> {
    if n_paths == 0 {
        return Err(Error::Argument("n_paths must be at least 1".into()));
    }
    grid.check()?;
    validate_model(model)?.into_result()?;
    let n = grid.n_steps;
    let sqrt_dt = grid.dt().sqrt();
    let mut dw = vec![T::zero(); n_paths * n];
    dw.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        let mut z = vec![0.0; n];
        path_normals(seed, p, &mut z);
        for (d, &zi) in row.iter_mut().zip(&z) {
            *d = T::lit(zi) * sqrt_dt;
        }
    });
    let factor = model.factor_model().map(|f| {
        let dt = grid.dt();
        let mut fv = vec![T::zero(); n_paths * (n + 1)];
        fv.par_chunks_mut(n + 1).zip(dw.par_chunks(n)).for_each(|(row, inc)| {
            row[0] = f.f0;
            for i in 0..n {
                row[i + 1] = row[i] + f.kappa * (f.mean - row[i]) * dt + f.nu * inc[i];
            }
        });
        fv
    });
    Ok(MarketPaths { model: model.clone(), grid, n_paths, seed, dw, factor })
}

impl<T: Real> MarketPaths<T> {
    pub fn model(&self) -> &MarketModel<T> {
        &self.model
    }

    pub fn grid(&self) -> TimeGrid<T> {
        self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn dw(&self, p: usize, i: usize) -> T {
        self.dw[p * self.grid.n_steps + i]
    }

    /// Increments of path `p`.
    pub fn dw_row(&self, p: usize) -> &[T] {
        let n = self.grid.n_steps;
        &self.dw[p * n..(p + 1) * n]
    }

    #[inline]
    pub fn factor(&self, p: usize, i: usize) -> T {
        match &self.factor {
            Some(f) => f[p * (self.grid.n_steps + 1) + i],
            None => T::zero(),
        }
    }

    #[inline]
    pub fn state(&self, p: usize, i: usize) -> PointState<T> {
        self.model.state(self.grid.t(i), self.factor(p, i))
    }

    pub fn dw_column(&self, i: usize) -> Vec<T> {
        (0..self.n_paths).map(|p| self.dw(p, i)).collect()
    }

    pub fn factor_column(&self, i: usize) -> Vec<T> {
        (0..self.n_paths).map(|p| self.factor(p, i)).collect()
    }

    /// Writes one row per path and grid point. The increment column is empty
    /// at the terminal point.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "path_id,step,t,W_incr,r,mu,sigma,rho,factor")?;
        for p in 0..self.n_paths {
            for i in 0..=self.grid.n_steps {
                let s = self.state(p, i);
                let inc = if i < self.grid.n_steps { self.dw(p, i).to_string() } else { String::new() };
                let f = if self.factor.is_some() { s.factor.to_string() } else { String::new() };
                writeln!(w, "{p},{i},{},{inc},{},{},{},{},{f}", s.t, s.r, s.mu, s.sigma, s.rho)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn vasicek() -> MarketModel<f64> {
        MarketModel::Factor(FactorModel {
            kappa: 1.0,
            mean: 0.03,
            nu: 0.01,
            f0: 0.05,
            r: CoefficientMap::ClampedAffine { intercept: 0.0, slope: 1.0, lo: 0.0, hi: 0.1 },
            mu: CoefficientMap::ClampedAffine { intercept: 0.05, slope: 1.0, lo: 0.05, hi: 0.15 },
            sigma: CoefficientMap::Constant { value: 0.2 },
        })
    }

    #[test]
    fn grid_ends_exactly_at_horizon() {
        let g = TimeGrid::new(0.7f64, 3).unwrap();
        assert_eq!(g.t(3), 0.7);
        assert!(g.times().windows(2).all(|w| w[0] < w[1]));
        assert!(TimeGrid::new(0.0f64, 3).is_err());
        assert!(TimeGrid::new(1.0f64, 0).is_err());
    }

    #[test]
    fn constant_model_reports_sharpe_ratio() {
        let rep = validate_model(&MarketModel::constant(0.03, 0.08, 0.2)).unwrap();
        assert!(rep.passed());
        assert_relative_eq!(rep.rho().unwrap(), 0.25, epsilon = 1e-15);
        assert!(rep.warnings.is_empty());
    }

    #[test]
    fn zero_sharpe_ratio_warns() {
        let rep = validate_model(&MarketModel::constant(0.0, 0.0, 0.2)).unwrap();
        assert!(rep.passed());
        assert_eq!(rep.warnings, vec!["ρ ≡ 0".to_string()]);
    }

    #[test]
    fn zero_volatility_fails() {
        let rep = validate_model(&MarketModel::constant(0.03, 0.08, 0.0)).unwrap();
        assert!(!rep.passed());
        let err = rep.into_result().unwrap_err();
        assert!(err.to_string().contains("sigma not bounded away from 0"));
    }

    #[test]
    fn non_covering_piecewise_is_structural() {
        let bad = MarketModel::Deterministic {
            r: PiecewiseConstant { breaks: vec![0.1, 0.5], values: vec![0.01, 0.02] },
            mu: PiecewiseConstant::constant(0.05),
            sigma: PiecewiseConstant::constant(0.2),
        };
        assert!(matches!(validate_model(&bad), Err(Error::Structural(_))));
    }

    #[test]
    fn piecewise_eval_uses_left_closed_intervals() {
        let f = PiecewiseConstant { breaks: vec![0.0, 0.5], values: vec![1.0, 2.0] };
        assert_eq!(f.eval(0.0), 1.0);
        assert_eq!(f.eval(0.4999), 1.0);
        assert_eq!(f.eval(0.5), 2.0);
        assert_eq!(f.eval(10.0), 2.0);
    }

    #[test]
    fn tabulated_interpolates_and_flattens() {
        let m = CoefficientMap::Tabulated { knots: vec![0.0, 1.0], values: vec![0.1, 0.3] };
        assert_relative_eq!(m.eval(0.5), 0.2);
        assert_eq!(m.eval(-3.0), 0.1);
        assert_eq!(m.eval(3.0), 0.3);
    }

    #[test]
    fn zero_paths_is_an_argument_error() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        assert!(matches!(simulate_paths(&MarketModel::constant(0.0, 0.08, 0.2), g, 0, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn constant_model_columns_are_constant() {
        let g = TimeGrid::new(1.0, 5).unwrap();
        let paths = simulate_paths(&MarketModel::constant(0.03, 0.08, 0.2), g, 50, 3).unwrap();
        for p in 0..50 {
            for i in 0..=5 {
                let s = paths.state(p, i);
                assert_eq!((s.r, s.sigma), (0.03, 0.2));
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical_and_thread_independent() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let a = simulate_paths(&vasicek(), g, 500, 42).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| simulate_paths(&vasicek(), g, 500, 42).unwrap());
        assert_eq!(a.dw, b.dw);
        assert_eq!(a.factor, b.factor);
        let c = simulate_paths(&vasicek(), g, 500, 43).unwrap();
        assert_ne!(a.dw, c.dw);
    }

    #[test]
    fn increments_have_brownian_moments() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let n = 20_000;
        let paths = simulate_paths(&MarketModel::constant(0.0, 0.08, 0.2), g, n, 11).unwrap();
        let dt = g.dt();
        for i in 0..4 {
            let col = paths.dw_column(i);
            let m = col.iter().sum::<f64>() / n as f64;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
            assert!(m.abs() < 3.0 * (dt / n as f64).sqrt(), "mean {m}");
            // Var of the sample variance is 2 dt^2 / n for normal data.
            assert!((v - dt).abs() < 3.0 * dt * (2.0 / n as f64).sqrt(), "var {v}");
        }
    }

    #[test]
    fn factor_terminal_mean_matches_ou() {
        // Euler bias in the mean is about 0.0037 dt, well below 3 SE here.
        let g = TimeGrid::new(1.0, 250).unwrap();
        let n = 100_000;
        let paths = simulate_paths(&vasicek(), g, n, 5).unwrap();
        let col = paths.factor_column(250);
        let m = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt();
        let exact = 0.03 + (0.05 - 0.03) * (-1.0f64).exp();
        assert!((m - exact).abs() < 3.0 * sd / (n as f64).sqrt(), "{m} vs {exact}");
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let paths = simulate_paths(&vasicek(), g, 2, 1).unwrap();
        let mut buf = Vec::new();
        paths.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "path_id,step,t,W_incr,r,mu,sigma,rho,factor");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[3].starts_with("0,2,1,,"));
    }

    proptest! {
        #[test]
        fn sampled_coefficients_respect_bounds(seed in any::<u64>(), slope in -5.0f64..5.0) {
            let model = MarketModel::Factor(FactorModel {
                kappa: 2.0, mean: 0.0, nu: 0.5, f0: 0.1,
                r: CoefficientMap::ClampedAffine { intercept: 0.02, slope, lo: -0.01, hi: 0.06 },
                mu: CoefficientMap::Tabulated { knots: vec![-0.5, 0.0, 0.5], values: vec![0.0, 0.05, 0.1] },
                sigma: CoefficientMap::ClampedAffine { intercept: 0.2, slope: -slope, lo: 0.1, hi: 0.4 },
            });
            let g = TimeGrid::new(1.0, 8).unwrap();
            let paths = simulate_paths(&model, g, 64, seed).unwrap();
            let rep = validate_model(&model).unwrap();
            for p in 0..64 {
                for i in 0..=8 {
                    let s = paths.state(p, i);
                    prop_assert!((-0.01..=0.06).contains(&s.r));
                    prop_assert!((0.0..=0.1).contains(&s.mu));
                    prop_assert!((0.1..=0.4).contains(&s.sigma));
                    prop_assert!(s.rho >= rep.rho_range.0 - 1e-12 && s.rho <= rep.rho_range.1 + 1e-12);
                }
            }
        }
    }
}
