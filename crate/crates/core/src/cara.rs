//! Exponential-utility game: discount and certainty-equivalent BSDEs, best
//! responses, the equilibrium classification and equilibrium values.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bsde::{
    pde_oracle, solve_closed_form, solve_linear_girsanov, solve_quadratic_regression, BsdeGridSolution, BsdeSpec,
    FdConfig, LinearBsdeProblem, Numerics, Process, QuadraticDriverSpec,
};
use crate::error::{Error, Result};
use crate::market::{simulate_paths, MarketModel, MarketPaths, PointState, TimeGrid};
use crate::scalar::{mean, Field, Real};

/// Agent population: risk tolerances, competition weights, initial wealths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentParams<T> {
    pub delta: Vec<T>,
    pub theta: Vec<T>,
    pub x0: Vec<T>,
}

impl<T: Field> AgentParams<T> {
    pub fn new(delta: Vec<T>, theta: Vec<T>, x0: Vec<T>) -> Result<Self> {
        let p = Self { delta, theta, x0 };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.delta.len();
        if n == 0 {
            return Err(Error::Argument("at least one agent is required".into()));
        }
        if self.theta.len() != n || self.x0.len() != n {
            return Err(Error::Argument(format!(
                "{} risk tolerances, {} competition weights, {} initial wealths",
                n,
                self.theta.len(),
                self.x0.len()
            )));
        }
        for (j, d) in self.delta.iter().enumerate() {
            if !(*d > T::zero()) {
                return Err(Error::Argument(format!("delta[{j}] = {d:?} must be positive")));
            }
        }
        for (j, t) in self.theta.iter().enumerate() {
            if !(*t >= T::zero() && *t <= T::one()) {
                return Err(Error::Argument(format!("theta[{j}] = {t:?} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.delta.len()
    }

    pub fn theta_bar(&self) -> T {
        mean(&self.theta)
    }

    pub fn delta_bar(&self) -> T {
        mean(&self.delta)
    }

    pub fn x_bar(&self) -> T {
        mean(&self.x0)
    }
}

/// Solutions of the discount BSDE, stored through its logarithm
/// `(psi~, eta~) = (ln psi, eta / psi)`, and of the linear BSDE `(phi, Delta)`.
#[derive(Debug, Clone)]
pub struct CaraSolution<T> {
    pub log_psi: Arc<BsdeGridSolution<T>>,
    pub phi: Arc<BsdeGridSolution<T>>,
    /// Sample `L^2(dt x dP)` norm of `rho + Delta + eta / psi`.
    pub lambda_l2: T,
}

impl<T: Real> CaraSolution<T> {
    pub fn from_parts(
        log_psi: BsdeGridSolution<T>,
        phi: BsdeGridSolution<T>,
        paths: Option<&MarketPaths<T>>,
    ) -> Self {
        let mut sol = Self { log_psi: Arc::new(log_psi), phi: Arc::new(phi), lambda_l2: T::zero() };
        sol.lambda_l2 = sol.lambda_norm(paths);
        sol
    }

    fn lambda_norm(&self, paths: Option<&MarketPaths<T>>) -> T {
        let grid = self.log_psi.grid;
        let dt = grid.dt();
        let mut acc = T::zero();
        for i in 0..grid.n_steps {
            let ms = match paths {
                Some(p) => {
                    let k = p.grid().nearest_step(grid.t(i));
                    let s: T = (0..p.n_paths()).map(|q| self.lambda_risk(i, &p.state(q, k)).powi(2)).sum();
                    s / T::from_count(p.n_paths())
                }
                None => {
                    let s = self.log_psi.model.state(grid.t(i), self.log_psi.model.f0());
                    self.lambda_risk(i, &s).powi(2)
                }
            };
            acc += ms * dt;
        }
        acc.sqrt()
    }

    pub fn grid(&self) -> TimeGrid<T> {
        self.log_psi.grid
    }

    #[inline]
    pub fn psi(&self, i: usize, s: &PointState<T>) -> T {
        self.log_psi.y(i, s).exp()
    }

    /// `eta / psi`.
    #[inline]
    pub fn eta_tilde(&self, i: usize, s: &PointState<T>) -> T {
        self.log_psi.z(i, s)
    }

    #[inline]
    pub fn eta(&self, i: usize, s: &PointState<T>) -> T {
        self.psi(i, s) * self.eta_tilde(i, s)
    }

    #[inline]
    pub fn phi_value(&self, i: usize, s: &PointState<T>) -> T {
        self.phi.y(i, s)
    }

    /// Martingale integrand `Delta` of `phi`.
    #[inline]
    pub fn delta_z(&self, i: usize, s: &PointState<T>) -> T {
        self.phi.z(i, s)
    }

    /// `rho + Delta + eta / psi`.
    #[inline]
    pub fn lambda_risk(&self, i: usize, s: &PointState<T>) -> T {
        s.rho + self.delta_z(i, s) + self.eta_tilde(i, s)
    }

    pub fn point(&self, i: usize, s: &PointState<T>) -> CaraPoint<T> {
        CaraPoint {
            sigma: s.sigma,
            rho: s.rho,
            psi: self.psi(i, s),
            eta: self.eta(i, s),
            delta_z: self.delta_z(i, s),
        }
    }

    pub fn psi0(&self) -> T {
        self.log_psi.y0().exp()
    }

    pub fn phi0(&self) -> T {
        self.phi.y0()
    }
}

/// Linear BSDE for `phi` given the log-discount solution: tilt
/// `-(rho + eta~)`, source `-(rho + eta~)^2 / 2`, terminal 0.
pub fn phi_problem<T: Real>(log_psi: Arc<BsdeGridSolution<T>>) -> LinearBsdeProblem<T> {
    let lp = log_psi.clone();
    let b = Process::func(move |s: &PointState<T>| -(s.rho + lp.z_t(s)));
    let source = Process::func(move |s: &PointState<T>| {
        let l = s.rho + log_psi.z_t(s);
        -T::lit(0.5) * l * l
    });
    LinearBsdeProblem::new(Process::constant(T::zero()), b, source, T::zero())
}

/// Solves both BSDEs. State-free models use the closed forms; factor models
/// use regression for the log-discount BSDE and the change-of-measure solver
/// for `phi`, on paths simulated from `numerics`.
pub fn solve_cara_bsdes<T: Real>(
    model: &MarketModel<T>,
    grid: TimeGrid<T>,
    numerics: &Numerics,
) -> Result<CaraSolution<T>> {
    if !model.is_factor() {
        let lp = solve_closed_form(&BsdeSpec::Quadratic(QuadraticDriverSpec::log_discount()), model, grid)?;
        let phi = solve_closed_form(&BsdeSpec::Linear(phi_problem(Arc::new(lp.clone()))), model, grid)?;
        return Ok(CaraSolution::from_parts(lp, phi, None));
    }
    let paths = simulate_paths(model, grid, numerics.n_paths, numerics.seed)?;
    solve_cara_on_paths(&paths, numerics.basis_degree)
}

pub fn solve_cara_on_paths<T: Real>(paths: &MarketPaths<T>, basis_degree: usize) -> Result<CaraSolution<T>> {
    let lp = Arc::new(solve_quadratic_regression(&QuadraticDriverSpec::log_discount(), paths, basis_degree)?);
    let phi = solve_linear_girsanov(&phi_problem(lp.clone()), paths, basis_degree)?;
    let mut sol = CaraSolution { log_psi: lp, phi: Arc::new(phi), lambda_l2: T::zero() };
    sol.lambda_l2 = sol.lambda_norm(Some(paths));
    Ok(sol)
}

/// Finite-difference solution of both BSDEs for a factor model.
pub fn solve_cara_pde<T: Real>(model: &MarketModel<T>, horizon: T, fd: FdConfig) -> Result<CaraSolution<T>> {
    let lp = Arc::new(pde_oracle(&BsdeSpec::Quadratic(QuadraticDriverSpec::log_discount()), model, horizon, fd)?);
    let phi = pde_oracle(&BsdeSpec::Linear(phi_problem(lp.clone())), model, horizon, fd)?;
    let mut sol = CaraSolution { log_psi: lp, phi: Arc::new(phi), lambda_l2: T::zero() };
    sol.lambda_l2 = sol.lambda_norm(None);
    Ok(sol)
}

/// Coefficients at one point of the state space.
#[derive(Debug, Clone, PartialEq)]
pub struct CaraPoint<F> {
    pub sigma: F,
    pub rho: F,
    pub psi: F,
    pub eta: F,
    pub delta_z: F,
}

impl<F: Field> CaraPoint<F> {
    pub fn lambda_risk(&self) -> F {
        self.rho.clone() + self.delta_z.clone() + self.eta.clone() / self.psi.clone()
    }
}

/// Best response of agent `j` at one point, given own wealth, the average
/// wealth and the sum of the other agents' amounts.
pub fn best_response_cara_point<F: Field>(
    n: usize,
    delta_j: F,
    theta_j: F,
    pt: &CaraPoint<F>,
    x_j: F,
    x_bar: F,
    others_sum: F,
) -> Result<F> {
    let nf = F::from_count(n);
    let denom = nf.clone() - theta_j.clone();
    if denom == F::zero() {
        return Err(Error::DivisionByZero("best response with n - theta_j = 0 (single agent with theta = 1)".into()));
    }
    let sp = pt.sigma.clone() * pt.psi.clone();
    let slope = -(nf.clone() * pt.eta.clone()) / (denom.clone() * sp.clone());
    Ok(slope * (x_j - theta_j.clone() * x_bar) + theta_j / denom.clone() * others_sum
        + nf * delta_j / (denom * sp) * pt.lambda_risk())
}

/// Equilibrium amount of agent `j` at one point.
pub fn equilibrium_cara_point<F: Field>(
    delta_bar: F,
    theta_bar: F,
    delta_j: F,
    theta_j: F,
    pt: &CaraPoint<F>,
    x_j: F,
) -> F {
    let sp = pt.sigma.clone() * pt.psi.clone();
    let c = delta_j + delta_bar * theta_j / (F::one() - theta_bar);
    -(pt.eta.clone() / sp.clone()) * x_j + c * pt.lambda_risk() / sp
}

/// Value `-exp(-psi(0) / delta_j (x_j - theta_j x_bar) + phi(0))`.
pub fn value_cara_point<T: Real>(psi0: T, phi0: T, delta_j: T, theta_j: T, x_j: T, x_bar: T) -> T {
    -(-psi0 / delta_j * (x_j - theta_j * x_bar) + phi0).exp()
}

pub fn value_cara<T: Real>(params: &AgentParams<T>, sol: &CaraSolution<T>) -> Vec<T> {
    let (psi0, phi0, xb) = (sol.psi0(), sol.phi0(), params.x_bar());
    (0..params.n())
        .map(|j| value_cara_point(psi0, phi0, params.delta[j], params.theta[j], params.x0[j], xb))
        .collect()
}

/// Best response of agent `j` at step `i`, state `s`, wealths `x` and the
/// other agents' current amounts `pis` (entry `j` is ignored).
pub fn best_response_cara<T: Real>(
    j: usize,
    params: &AgentParams<T>,
    sol: &CaraSolution<T>,
    i: usize,
    s: &PointState<T>,
    x: &[T],
    pis: &[T],
) -> Result<T> {
    let others: T = pis.iter().enumerate().filter(|&(k, _)| k != j).map(|(_, &v)| v).sum();
    let xb = x.iter().copied().sum::<T>() / T::from_count(x.len());
    best_response_cara_point(params.n(), params.delta[j], params.theta[j], &sol.point(i, s), x[j], xb, others)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Classification {
    Unique,
    Infinite,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaraTolerances {
    /// Distance of the mean competition weight from 1 treated as equality.
    pub theta: f64,
    /// Threshold on the `L^2` norm of `rho + Delta + eta / psi`.
    pub case3: f64,
}

impl Default for CaraTolerances {
    fn default() -> Self {
        Self { theta: 1e-12, case3: 1e-3 }
    }
}

/// Description of the equilibrium family when it is not unique.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyDescriptor {
    pub formula: String,
    pub reference_agent: usize,
    pub representative: String,
}

#[derive(Debug, Clone)]
pub struct CaraEquilibrium<T> {
    pub classification: Classification,
    pub theta_bar: T,
    pub delta_bar: T,
    pub lambda_l2: T,
    /// `delta_j + delta_bar theta_j / (1 - theta_bar)` (unique case only).
    pub intercept_coef: Vec<T>,
    pub values: Vec<T>,
    pub family: Option<FamilyDescriptor>,
    pub notes: Vec<String>,
    pub solution: Arc<CaraSolution<T>>,
}

pub fn classify_and_build_equilibrium<T: Real>(
    params: &AgentParams<T>,
    sol: Arc<CaraSolution<T>>,
    tol: CaraTolerances,
) -> Result<CaraEquilibrium<T>> {
    params.check()?;
    let (tb, db) = (params.theta_bar(), params.delta_bar());
    let gap = (T::one() - tb).to_f64_lossy();
    let l2 = sol.lambda_l2;
    let mut notes = Vec::new();
    let (classification, intercept_coef, values, family) = if gap > tol.theta {
        if gap < 1e-6 {
            notes.push(format!("mean competition weight within {gap:.1e} of 1; intercepts are ill-conditioned"));
        }
        let c = params.delta.iter().zip(&params.theta).map(|(&d, &t)| d + db * t / (T::one() - tb)).collect();
        (Classification::Unique, c, value_cara(params, &sol), None)
    } else {
        let e = l2.to_f64_lossy();
        if (e - tol.case3).abs() < 0.5 * tol.case3 {
            notes.push(format!("risk-premium norm {e:.3e} is close to the threshold {:.1e}", tol.case3));
        }
        if e < tol.case3 {
            let n = params.n();
            let family = FamilyDescriptor {
                formula: format!("pi_j = pi_{n} + (rho / sigma) (X_j - X_{n}) for j < {n}, pi_{n} arbitrary"),
                reference_agent: n - 1,
                representative: format!("pi_{n} = 0"),
            };
            (Classification::Infinite, Vec::new(), value_cara(params, &sol), Some(family))
        } else {
            (Classification::None, Vec::new(), Vec::new(), None)
        }
    };
    Ok(CaraEquilibrium {
        classification,
        theta_bar: tb,
        delta_bar: db,
        lambda_l2: l2,
        intercept_coef,
        values,
        family,
        notes,
        solution: sol,
    })
}

impl<T: Real> CaraEquilibrium<T> {
    /// Wealth coefficient `-eta / (sigma psi)` shared by all agents.
    pub fn slope(&self, i: usize, s: &PointState<T>) -> T {
        -self.solution.eta_tilde(i, s) / s.sigma
    }

    /// Wealth-free part of agent `j`'s amount.
    pub fn intercept(&self, j: usize, i: usize, s: &PointState<T>) -> T {
        match self.classification {
            Classification::Unique => {
                self.intercept_coef[j] * self.solution.lambda_risk(i, s) / (s.sigma * self.solution.psi(i, s))
            }
            _ => T::zero(),
        }
    }

    /// Amount held by agent `j` at wealths `x`. For the non-unique case this
    /// is the representative member with the reference agent holding nothing.
    pub fn strategy(&self, j: usize, i: usize, s: &PointState<T>, x: &[T]) -> Option<T> {
        match self.classification {
            Classification::Unique => Some(self.slope(i, s) * x[j] + self.intercept(j, i, s)),
            Classification::Infinite => {
                let r = x.len() - 1;
                Some(s.rho / s.sigma * (x[j] - x[r]))
            }
            Classification::None => None,
        }
    }

    /// Largest deviation of the best response from the equilibrium over the
    /// supplied states and wealth vectors.
    pub fn fixed_point_residual<'a>(
        &self,
        params: &AgentParams<T>,
        samples: impl IntoIterator<Item = (usize, PointState<T>, &'a [T])>,
    ) -> Result<T>
    where
        T: 'a,
    {
        let mut worst = T::zero();
        for (i, s, x) in samples {
            let pis: Option<Vec<T>> = (0..params.n()).map(|j| self.strategy(j, i, &s, x)).collect();
            let Some(pis) = pis else {
                return Err(Error::Argument("no equilibrium to test".into()));
            };
            for j in 0..params.n() {
                let br = best_response_cara(j, params, &self.solution, i, &s, x, &pis)?;
                worst = worst.max((br - pis[j]).abs());
            }
        }
        Ok(worst)
    }
}
