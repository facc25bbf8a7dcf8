//! Solvers for one-dimensional BSDEs written as
//! `dY = -g(t, Y, Z) dt + Z dW`, `Y(T) = xi`.
//!
//! * [`solve_quadratic_regression`]: explicit backward regression scheme for
//!   drivers `a0 + a1 z + a2 z^2`.
//! * [`solve_linear_girsanov`]: linear drivers `a y + b z + s` through the
//!   change-of-measure representation with pathwise weights.
//! * [`solve_closed_form`]: exact evaluation when coefficients are
//!   deterministic.
//! * [`pde_oracle`]: Crank–Nicolson solution of the associated parabolic PDE
//!   for factor models.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{MarketModel, MarketPaths, PointState, TimeGrid};
use crate::regress::{solve_tridiagonal, PolyFit, Regressor};
use crate::scalar::{quantile, sorted_copy, Real};

/// Monte Carlo resolution shared by the solvers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    pub n_paths: usize,
    pub basis_degree: usize,
    pub seed: u64,
}

impl Default for Numerics {
    fn default() -> Self {
        Self { n_paths: 100_000, basis_degree: 3, seed: 0 }
    }
}

/// `constant + r * r(t) + rho * rho(t) + rho2 * rho(t)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarketLoad<T> {
    pub constant: T,
    pub r: T,
    pub rho: T,
    pub rho2: T,
}

impl<T: Real> MarketLoad<T> {
    pub fn constant(c: T) -> Self {
        Self { constant: c, r: T::zero(), rho: T::zero(), rho2: T::zero() }
    }

    #[inline]
    pub fn eval(&self, s: &PointState<T>) -> T {
        self.constant + self.r * s.r + self.rho * s.rho + self.rho2 * s.rho * s.rho
    }
}

pub type StateFn<T> = Arc<dyn Fn(&PointState<T>) -> T + Send + Sync>;

/// Adapted coefficient given as a function of the market state.
#[derive(Clone)]
pub enum Process<T> {
    Market(MarketLoad<T>),
    Func(StateFn<T>),
}

impl<T: Real> Process<T> {
    pub fn constant(c: T) -> Self {
        Self::Market(MarketLoad::constant(c))
    }

    pub fn func(f: impl Fn(&PointState<T>) -> T + Send + Sync + 'static) -> Self {
        Self::Func(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, s: &PointState<T>) -> T {
        match self {
            Self::Market(m) => m.eval(s),
            Self::Func(f) => f(s),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Process<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Market(m) => f.debug_tuple("Market").field(m).finish(),
            Self::Func(_) => f.write_str("Func(..)"),
        }
    }
}

/// Driver `g(t, z) = a0 + a1 z + a2 z^2` with constant terminal value.
#[derive(Debug, Clone)]
pub struct QuadraticDriverSpec<T> {
    pub a0: Process<T>,
    pub a1: Process<T>,
    pub a2: T,
    pub terminal: T,
}

impl<T: Real> QuadraticDriverSpec<T> {
    /// Logarithm of the exponential-utility discount BSDE:
    /// `g = r - rho z - z^2 / 2`, terminal 0.
    pub fn log_discount() -> Self {
        Self {
            a0: Process::Market(MarketLoad { constant: T::zero(), r: T::one(), rho: T::zero(), rho2: T::zero() }),
            a1: Process::Market(MarketLoad { constant: T::zero(), r: T::zero(), rho: -T::one(), rho2: T::zero() }),
            a2: T::lit(-0.5),
            terminal: T::zero(),
        }
    }

    /// Power-utility equilibrium BSDE with constants `(c1, c2, c3)`:
    /// `g = z^2 / 2 + (c1 - 1) rho z + c2 rho^2 / 2 + c3 r`, terminal 0.
    pub fn power_equilibrium(c1: T, c2: T, c3: T) -> Self {
        let half = T::lit(0.5);
        Self {
            a0: Process::Market(MarketLoad { constant: T::zero(), r: c3, rho: T::zero(), rho2: half * c2 }),
            a1: Process::Market(MarketLoad { constant: T::zero(), r: T::zero(), rho: c1 - T::one(), rho2: T::zero() }),
            a2: half,
            terminal: T::zero(),
        }
    }

    #[inline]
    fn driver(&self, s: &PointState<T>, z: T) -> T {
        self.a0.eval(s) + (self.a1.eval(s) + self.a2 * z) * z
    }
}

/// Linear BSDE `dY = -(a Y + b Z + s) dt + Z dW`, `Y(T) = xi`.
#[derive(Debug, Clone)]
pub struct LinearBsdeProblem<T> {
    pub a: Process<T>,
    pub b: Process<T>,
    pub source: Process<T>,
    pub terminal: Process<T>,
    /// Declared essential bounds of the terminal value, when known.
    pub terminal_bounds: Option<(T, T)>,
}

impl<T: Real> LinearBsdeProblem<T> {
    pub fn new(a: Process<T>, b: Process<T>, source: Process<T>, terminal: T) -> Self {
        Self { a, b, source, terminal: Process::constant(terminal), terminal_bounds: Some((terminal, terminal)) }
    }
}

/// Either BSDE family, for the solvers that accept both.
#[derive(Debug, Clone)]
pub enum BsdeSpec<T> {
    Quadratic(QuadraticDriverSpec<T>),
    Linear(LinearBsdeProblem<T>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Regression,
    Girsanov,
    ClosedForm,
    Pde,
    Synthetic,
}

/// Representation of `Y` or `Z` at one time step as a function of the state.
#[derive(Debug, Clone)]
pub enum Slice<T> {
    /// Polynomial in the factor value (degree 0 for state-free models).
    Poly(PolyFit<T>),
    /// Values on factor nodes, interpolated linearly and flat outside.
    Nodes { nodes: Arc<Vec<T>>, values: Vec<T> },
    /// Exact evaluation of a process.
    Exact(Process<T>),
}

impl<T: Real> Slice<T> {
    pub fn constant(c: T) -> Self {
        Self::Poly(PolyFit::constant(c))
    }

    #[inline]
    pub fn eval(&self, s: &PointState<T>) -> T {
        match self {
            Self::Poly(p) => p.eval(s.factor),
            Self::Exact(p) => p.eval(s),
            Self::Nodes { nodes, values } => interp(nodes, values, s.factor),
        }
    }
}

fn interp<T: Real>(nodes: &[T], values: &[T], x: T) -> T {
    let last = nodes.len() - 1;
    if x <= nodes[0] {
        return values[0];
    }
    if x >= nodes[last] {
        return values[last];
    }
    let h = (nodes[last] - nodes[0]) / T::from_count(last);
    let pos = (x - nodes[0]) / h;
    let k = pos.floor().to_usize().unwrap_or(0).min(last - 1);
    let w = pos - T::from_count(k);
    values[k] + (values[k + 1] - values[k]) * w
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    /// Smallest effective sample size of the change-of-measure weights, as a
    /// fraction of the number of paths.
    pub min_ess_fraction: Option<f64>,
    pub weight_clamps: usize,
    /// Range over paths of `exp(int_0^T a ds)`.
    pub discount_range: Option<(f64, f64)>,
    pub max_abs_z: f64,
    pub notes: Vec<String>,
}

/// Discrete `(Y, Z)` pair on a time grid.
#[derive(Debug, Clone)]
pub struct BsdeGridSolution<T> {
    pub scheme: Scheme,
    pub basis_degree: usize,
    pub n_paths: usize,
    pub grid: TimeGrid<T>,
    pub y: Vec<Slice<T>>,
    pub z: Vec<Slice<T>>,
    pub model: MarketModel<T>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SummaryRow {
    pub t: f64,
    pub y_mean: f64,
    pub y_p05: f64,
    pub y_p95: f64,
    pub z_mean: f64,
}

impl<T: Real> BsdeGridSolution<T> {
    /// Solution whose slices are given by per-step closures.
    pub fn synthetic(
        model: &MarketModel<T>,
        grid: TimeGrid<T>,
        y: impl Fn(usize) -> Process<T>,
        z: impl Fn(usize) -> Process<T>,
    ) -> Self {
        Self {
            scheme: Scheme::Synthetic,
            basis_degree: 0,
            n_paths: 0,
            grid,
            y: (0..=grid.n_steps).map(|i| Slice::Exact(y(i))).collect(),
            z: (0..=grid.n_steps).map(|i| Slice::Exact(z(i))).collect(),
            model: model.clone(),
            diagnostics: Diagnostics::default(),
        }
    }

    #[inline]
    pub fn y(&self, i: usize, s: &PointState<T>) -> T {
        self.y[i].eval(s)
    }

    #[inline]
    pub fn z(&self, i: usize, s: &PointState<T>) -> T {
        self.z[i].eval(s)
    }

    /// `Y` at the grid point nearest to `s.t`.
    #[inline]
    pub fn y_t(&self, s: &PointState<T>) -> T {
        self.y[self.grid.nearest_step(s.t)].eval(s)
    }

    #[inline]
    pub fn z_t(&self, s: &PointState<T>) -> T {
        self.z[self.grid.nearest_step(s.t)].eval(s)
    }

    pub fn initial_state(&self) -> PointState<T> {
        self.model.state(T::zero(), self.model.f0())
    }

    pub fn y0(&self) -> T {
        self.y(0, &self.initial_state())
    }

    pub fn z0(&self) -> T {
        self.z(0, &self.initial_state())
    }

    /// Cross-sectional statistics of `(Y, Z)` over the states visited by
    /// `paths`, one row per step of this solution's grid.
    pub fn summary(&self, paths: &MarketPaths<T>) -> Vec<SummaryRow> {
        (0..=self.grid.n_steps)
            .map(|i| {
                let t = self.grid.t(i);
                let k = paths.grid().nearest_step(t);
                let states: Vec<PointState<T>> = (0..paths.n_paths())
                    .map(|p| paths.model().state(t, paths.factor(p, k)))
                    .collect();
                let ys: Vec<T> = states.iter().map(|s| self.y(i, s)).collect();
                let zs: Vec<T> = states.iter().map(|s| self.z(i, s)).collect();
                let sorted = sorted_copy(&ys);
                let n = T::from_count(ys.len());
                SummaryRow {
                    t: t.to_f64_lossy(),
                    y_mean: (ys.iter().copied().sum::<T>() / n).to_f64_lossy(),
                    y_p05: quantile(&sorted, 0.05).to_f64_lossy(),
                    y_p95: quantile(&sorted, 0.95).to_f64_lossy(),
                    z_mean: (zs.iter().copied().sum::<T>() / n).to_f64_lossy(),
                }
            })
            .collect()
    }

    pub fn write_summary_csv<W: Write>(&self, paths: &MarketPaths<T>, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,Y_mean,Y_p05,Y_p95,Z_mean")?;
        for r in self.summary(paths) {
            writeln!(w, "{},{},{},{},{}", r.t, r.y_mean, r.y_p05, r.y_p95, r.z_mean)?;
        }
        Ok(())
    }
}

fn all_equal<T: PartialEq>(xs: &[T]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

/// Conditional mean of `ys` given the regressor, exact when `ys` is constant.
fn conditional_mean<T: Real>(reg: &Regressor<'_, T>, ys: &[T]) -> PolyFit<T> {
    if all_equal(ys) {
        PolyFit::constant(ys[0])
    } else {
        reg.fit(ys)
    }
}

/// Martingale integrand estimate from `Y_{i+1}` on the paths, with the
/// conditional mean subtracted as a control variate.
fn martingale_integrand<T: Real>(
    reg: &Regressor<'_, T>,
    x: &[T],
    y_next: &[T],
    dw: &[T],
    dt: T,
) -> PolyFit<T> {
    if all_equal(y_next) {
        return PolyFit::constant(T::zero());
    }
    let ey = reg.fit(y_next);
    let prod: Vec<T> = x
        .par_iter()
        .zip(y_next.par_iter().zip(dw.par_iter()))
        .map(|(&xp, (&yp, &d))| (yp - ey.eval(xp)) * d / dt)
        .collect();
    reg.fit(&prod)
}

fn max_abs_z<T: Real>(fits: &[Slice<T>], x: &[Vec<T>]) -> f64 {
    fits.iter()
        .zip(x)
        .map(|(f, xs)| match f {
            Slice::Poly(p) => xs.iter().map(|&v| p.eval(v).abs().to_f64_lossy()).fold(0.0, f64::max),
            _ => 0.0,
        })
        .fold(0.0, f64::max)
}

/// Explicit backward regression for a quadratic driver:
/// `Z_i = E[(Y_{i+1} - E_i Y_{i+1}) dW_i | F_i] / dt`,
/// `Y_i = E[Y_{i+1} | F_i] + g(t_i, Z_i) dt`.
pub fn solve_quadratic_regression<T: Real>(
    spec: &QuadraticDriverSpec<T>,
    paths: &MarketPaths<T>,
    basis_degree: usize,
) -> Result<BsdeGridSolution<T>> {
    let grid = paths.grid();
    let (n_steps, n_paths, dt) = (grid.n_steps, paths.n_paths(), grid.dt());
    let mut y_slices = vec![Slice::constant(spec.terminal); n_steps + 1];
    let mut z_slices = vec![Slice::constant(T::zero()); n_steps + 1];
    let mut y_next = vec![spec.terminal; n_paths];
    let mut xs_seen = Vec::with_capacity(n_steps);
    for i in (0..n_steps).rev() {
        let x = paths.factor_column(i);
        let dw = paths.dw_column(i);
        let reg = Regressor::new(&x, None, basis_degree, i)?;
        let ey = conditional_mean(&reg, &y_next);
        let zf = martingale_integrand(&reg, &x, &y_next, &dw, dt);
        let y_now: Vec<T> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let s = paths.state(p, i);
                let z = zf.eval(s.factor);
                ey.eval(s.factor) + spec.driver(&s, z) * dt
            })
            .collect();
        if let Some(p) = y_now.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: i, detail: format!("Y on path {p}") });
        }
        y_slices[i] = Slice::Poly(conditional_mean(&reg, &y_now));
        z_slices[i] = Slice::Poly(zf);
        y_next = y_now;
        xs_seen.push(x);
    }
    xs_seen.reverse();
    let mut diagnostics = Diagnostics::default();
    diagnostics.max_abs_z = max_abs_z(&z_slices[..n_steps], &xs_seen);
    Ok(BsdeGridSolution {
        scheme: Scheme::Regression,
        basis_degree,
        n_paths,
        grid,
        y: y_slices,
        z: z_slices,
        model: paths.model().clone(),
        diagnostics,
    })
}

/// Per-step bound on the log-weight increment `b dW - b^2 dt / 2`.
const LOG_WEIGHT_CLAMP: f64 = 30.0;

/// Linear BSDE through the representation
/// `Y_i = E^Q[xi e^{int a} + int s e^{int a} | F_i]` with
/// `dQ/dP = exp(int b dW - int b^2 dt / 2)`. Conditional expectations under
/// `Q` are self-normalized weighted regressions on the factor state.
pub fn solve_linear_girsanov<T: Real>(
    problem: &LinearBsdeProblem<T>,
    paths: &MarketPaths<T>,
    basis_degree: usize,
) -> Result<BsdeGridSolution<T>> {
    let grid = paths.grid();
    let (n_steps, n_paths, dt) = (grid.n_steps, paths.n_paths(), grid.dt());
    let half = T::lit(0.5);
    let clamp = T::lit(LOG_WEIGHT_CLAMP);

    let terminal: Vec<T> = (0..n_paths).map(|p| problem.terminal.eval(&paths.state(p, n_steps))).collect();
    if let Some((lo, hi)) = problem.terminal_bounds {
        if terminal.iter().any(|&v| v < lo || v > hi) {
            return Err(Error::Argument("terminal value outside its declared bounds".into()));
        }
    }
    let mut q = terminal.clone();
    let mut y_next = terminal;
    let mut log_w = vec![T::zero(); n_paths];
    let mut log_disc = vec![T::zero(); n_paths];
    let mut y_slices = vec![Slice::Exact(problem.terminal.clone()); n_steps + 1];
    let mut z_slices = vec![Slice::constant(T::zero()); n_steps + 1];
    let mut diagnostics = Diagnostics::default();
    let mut min_ess = f64::INFINITY;
    let mut xs_seen = Vec::with_capacity(n_steps);

    for i in (0..n_steps).rev() {
        let x = paths.factor_column(i);
        let dw = paths.dw_column(i);
        let clamped: Vec<bool> = (0..n_paths)
            .into_par_iter()
            .zip(log_w.par_iter_mut().zip(q.par_iter_mut().zip(log_disc.par_iter_mut())))
            .map(|(p, (lw, (qp, ld)))| {
                let s = paths.state(p, i);
                let (a, b, src) = (problem.a.eval(&s), problem.b.eval(&s), problem.source.eval(&s));
                let inc = b * dw[p] - half * b * b * dt;
                let hit = inc.abs() > clamp;
                *lw += inc.max(-clamp).min(clamp);
                *qp = src * dt + (a * dt).exp() * *qp;
                *ld += a * dt;
                hit
            })
            .collect();
        diagnostics.weight_clamps += clamped.iter().filter(|&&c| c).count();

        let max_lw = log_w.iter().copied().fold(T::neg_infinity(), T::max);
        let w: Vec<T> = log_w.par_iter().map(|&l| (l - max_lw).exp()).collect();
        let sw: T = w.iter().copied().sum();
        let sw2: T = w.iter().map(|&v| v * v).sum();
        let ess = (sw * sw / sw2).to_f64_lossy();
        if !ess.is_finite() || ess < 0.01 * n_paths as f64 {
            return Err(Error::WeightDegeneracy { step: i, ess, n_paths });
        }
        min_ess = min_ess.min(ess / n_paths as f64);

        let wreg = Regressor::new(&x, Some(&w), basis_degree, i)?;
        let yf = conditional_mean(&wreg, &q);
        let reg = Regressor::new(&x, None, basis_degree, i)?;
        let zf = martingale_integrand(&reg, &x, &y_next, &dw, dt);
        let y_now: Vec<T> = x.par_iter().map(|&xp| yf.eval(xp)).collect();
        if let Some(p) = y_now.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: i, detail: format!("Y on path {p}") });
        }
        y_slices[i] = Slice::Poly(yf);
        z_slices[i] = Slice::Poly(zf);
        y_next = y_now;
        xs_seen.push(x);
    }

    let (dmin, dmax) = log_disc
        .iter()
        .map(|&l| l.exp().to_f64_lossy())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !(dmin > 0.0 && dmax.is_finite()) {
        return Err(Error::NonFinite { step: 0, detail: format!("discount factor range [{dmin}, {dmax}]") });
    }
    xs_seen.reverse();
    diagnostics.discount_range = Some((dmin, dmax));
    diagnostics.min_ess_fraction = Some(min_ess.min(1.0));
    diagnostics.max_abs_z = max_abs_z(&z_slices[..n_steps], &xs_seen);
    if diagnostics.weight_clamps > 0 {
        diagnostics.notes.push(format!(
            "{} log-weight increments clamped at ±{LOG_WEIGHT_CLAMP}; the tilt may not be BMO",
            diagnostics.weight_clamps
        ));
    }
    Ok(BsdeGridSolution {
        scheme: Scheme::Girsanov,
        basis_degree,
        n_paths,
        grid,
        y: y_slices,
        z: z_slices,
        model: paths.model().clone(),
        diagnostics,
    })
}

/// Exact solution for state-free models: `Z = 0` and `Y` integrates the
/// deterministic driver on the grid. Exact for coefficients that are
/// constant on grid cells.
pub fn solve_closed_form<T: Real>(
    spec: &BsdeSpec<T>,
    model: &MarketModel<T>,
    grid: TimeGrid<T>,
) -> Result<BsdeGridSolution<T>> {
    if model.is_factor() {
        return Err(Error::UnsupportedModel("closed form requires a constant or deterministic model".into()));
    }
    grid.check()?;
    let n = grid.n_steps;
    let dt = grid.dt();
    let state = |i: usize| model.state(grid.t(i), T::zero());
    let mut y = vec![T::zero(); n + 1];
    match spec {
        BsdeSpec::Quadratic(q) => {
            y[n] = q.terminal;
            for i in (0..n).rev() {
                y[i] = y[i + 1] + q.a0.eval(&state(i)) * dt;
            }
        }
        BsdeSpec::Linear(l) => {
            y[n] = l.terminal.eval(&state(n));
            for i in (0..n).rev() {
                let s = state(i);
                y[i] = l.source.eval(&s) * dt + (l.a.eval(&s) * dt).exp() * y[i + 1];
            }
        }
    }
    Ok(BsdeGridSolution {
        scheme: Scheme::ClosedForm,
        basis_degree: 0,
        n_paths: 0,
        grid,
        y: y.into_iter().map(Slice::constant).collect(),
        z: vec![Slice::constant(T::zero()); n + 1],
        model: model.clone(),
        diagnostics: Diagnostics::default(),
    })
}

/// Finite-difference resolution for [`pde_oracle`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdConfig {
    pub n_nodes: usize,
    pub n_time: usize,
    /// Half-width of the factor domain beyond `[min(f0, m), max(f0, m)]`, in
    /// stationary standard deviations.
    pub width_sd: f64,
    pub picard_iters: usize,
    /// Minimum distance from the initial factor to either edge, in stationary
    /// standard deviations.
    pub min_edge_sd: f64,
    /// Largest admissible node spacing, in stationary standard deviations.
    pub max_spacing_sd: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { n_nodes: 401, n_time: 400, width_sd: 9.0, picard_iters: 4, min_edge_sd: 6.0, max_spacing_sd: 0.25 }
    }
}

/// Crank–Nicolson solution of
/// `Y_t + kappa (m - F) Y_F + nu^2 Y_FF / 2 + g(t, F, Y, nu Y_F) = 0`
/// on a truncated factor domain with Neumann edges. The quadratic
/// `Z`-term is resolved by Picard iteration within each step.
pub fn pde_oracle<T: Real>(
    spec: &BsdeSpec<T>,
    model: &MarketModel<T>,
    horizon: T,
    fd: FdConfig,
) -> Result<BsdeGridSolution<T>> {
    let f = model
        .factor_model()
        .ok_or_else(|| Error::UnsupportedModel("the PDE oracle needs a factor model".into()))?;
    if !(f.nu > T::zero()) {
        return Err(Error::UnsupportedModel("the PDE oracle needs a diffusive factor (nu > 0)".into()));
    }
    if fd.n_nodes < 5 || fd.n_time == 0 {
        return Err(Error::GridTooCoarse(format!("{} nodes, {} time levels", fd.n_nodes, fd.n_time)));
    }
    let grid = TimeGrid::new(horizon, fd.n_time)?;
    let sd = f.nu / (T::lit(2.0) * f.kappa).sqrt();
    let lo = f.f0.min(f.mean) - T::lit(fd.width_sd) * sd;
    let hi = f.f0.max(f.mean) + T::lit(fd.width_sd) * sd;
    let m = fd.n_nodes;
    let h = (hi - lo) / T::from_count(m - 1);
    let edge = ((f.f0 - lo).min(hi - f.f0) / sd).to_f64_lossy();
    if edge < fd.min_edge_sd {
        return Err(Error::GridTooCoarse(format!(
            "initial factor is {edge:.2} sd from the domain edge (need {})",
            fd.min_edge_sd
        )));
    }
    let spacing = (h / sd).to_f64_lossy();
    if spacing > fd.max_spacing_sd {
        return Err(Error::GridTooCoarse(format!(
            "node spacing is {spacing:.3} sd (need at most {})",
            fd.max_spacing_sd
        )));
    }
    let nodes: Arc<Vec<T>> = Arc::new((0..m).map(|k| lo + h * T::from_count(k)).collect());
    let dt = grid.dt();
    let half = T::lit(0.5);
    let nu2 = f.nu * f.nu;

    // Per-level coefficients: reaction `a`, source, advection, quadratic.
    struct Level<T> {
        react: Vec<T>,
        source: Vec<T>,
        adv: Vec<T>,
    }
    let coeffs = |t: T| -> Level<T> {
        let mut lvl = Level { react: vec![T::zero(); m], source: vec![T::zero(); m], adv: vec![T::zero(); m] };
        for (k, &x) in nodes.iter().enumerate() {
            let s = model.state(t, x);
            let (react, source, tilt) = match spec {
                BsdeSpec::Quadratic(q) => (T::zero(), q.a0.eval(&s), q.a1.eval(&s)),
                BsdeSpec::Linear(l) => (l.a.eval(&s), l.source.eval(&s), l.b.eval(&s)),
            };
            lvl.react[k] = react;
            lvl.source[k] = source;
            lvl.adv[k] = f.kappa * (f.mean - x) + f.nu * tilt;
        }
        lvl
    };
    let a2 = match spec {
        BsdeSpec::Quadratic(q) => q.a2,
        BsdeSpec::Linear(_) => T::zero(),
    };
    let diff = half * nu2 / (h * h);
    // Tridiagonal entries of the spatial operator at each node.
    let operator = |lvl: &Level<T>| -> (Vec<T>, Vec<T>, Vec<T>) {
        let mut lower = vec![T::zero(); m];
        let mut diag = vec![T::zero(); m];
        let mut upper = vec![T::zero(); m];
        for k in 0..m {
            diag[k] = -T::lit(2.0) * diff + lvl.react[k];
            if k == 0 {
                upper[k] = T::lit(2.0) * diff;
            } else if k == m - 1 {
                lower[k] = T::lit(2.0) * diff;
            } else {
                let a = lvl.adv[k] / (T::lit(2.0) * h);
                lower[k] = diff - a;
                upper[k] = diff + a;
            }
        }
        (lower, diag, upper)
    };
    let gradient = |y: &[T]| -> Vec<T> {
        (0..m)
            .map(|k| if k == 0 || k == m - 1 { T::zero() } else { (y[k + 1] - y[k - 1]) / (T::lit(2.0) * h) })
            .collect()
    };
    let quad = |y: &[T]| -> Vec<T> { gradient(y).into_iter().map(|g| a2 * nu2 * g * g).collect() };

    let terminal: Vec<T> = match spec {
        BsdeSpec::Quadratic(q) => vec![q.terminal; m],
        BsdeSpec::Linear(l) => nodes.iter().map(|&x| l.terminal.eval(&model.state(horizon, x))).collect(),
    };
    let n = grid.n_steps;
    let mut levels: Vec<Vec<T>> = vec![Vec::new(); n + 1];
    levels[n] = terminal;
    let mut upper_lvl = coeffs(grid.t(n));
    for i in (0..n).rev() {
        let lower_lvl = coeffs(grid.t(i));
        let y_up = &levels[i + 1];
        let (lu, du, uu) = operator(&upper_lvl);
        let nl_up = quad(y_up);
        let explicit: Vec<T> = (0..m)
            .map(|k| {
                let mut v = y_up[k] + half * dt * du[k] * y_up[k];
                if k > 0 {
                    v += half * dt * lu[k] * y_up[k - 1];
                }
                if k + 1 < m {
                    v += half * dt * uu[k] * y_up[k + 1];
                }
                v + half * dt * (lower_lvl.source[k] + upper_lvl.source[k]) + half * dt * nl_up[k]
            })
            .collect();
        let (ll, dl, ul) = operator(&lower_lvl);
        let lower: Vec<T> = ll.iter().map(|&v| -half * dt * v).collect();
        let diag: Vec<T> = dl.iter().map(|&v| T::one() - half * dt * v).collect();
        let upper: Vec<T> = ul.iter().map(|&v| -half * dt * v).collect();
        let iters = if a2 == T::zero() { 1 } else { fd.picard_iters.max(1) };
        let mut y = y_up.clone();
        for _ in 0..iters {
            let nl = quad(&y);
            let rhs: Vec<T> = explicit.iter().zip(&nl).map(|(&e, &q)| e + half * dt * q).collect();
            y = solve_tridiagonal(&lower, &diag, &upper, &rhs);
        }
        if let Some(k) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: i, detail: format!("PDE value at node {k}") });
        }
        levels[i] = y;
        upper_lvl = lower_lvl;
    }

    let z: Vec<Slice<T>> = levels
        .iter()
        .map(|y| Slice::Nodes { nodes: nodes.clone(), values: gradient(y).into_iter().map(|g| f.nu * g).collect() })
        .collect();
    let y: Vec<Slice<T>> = levels.into_iter().map(|values| Slice::Nodes { nodes: nodes.clone(), values }).collect();
    let mut diagnostics = Diagnostics::default();
    diagnostics.notes.push(format!(
        "domain [{lo}, {hi}], {m} nodes, {n} steps, initial factor {edge:.1} sd from the edge"
    ));
    Ok(BsdeGridSolution {
        scheme: Scheme::Pde,
        basis_degree: 0,
        n_paths: 0,
        grid,
        y,
        z,
        model: model.clone(),
        diagnostics,
    })
}
