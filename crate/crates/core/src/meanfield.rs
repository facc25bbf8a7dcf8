//! Large-population limits of the equilibrium strategies and an empirical
//! convergence study against finite-n constants.

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{
    solve_closed_form, solve_quadratic_regression, BsdeGridSolution, BsdeSpec, Numerics, Process,
    QuadraticDriverSpec,
};
use crate::cara::{AgentParams, CaraSolution};
use crate::crra::compute_constants;
use crate::error::{Error, Result};
use crate::market::{simulate_paths, MarketModel, PointState, TimeGrid};
use crate::scalar::{quantile, sorted_copy, Field, Real};

/// Finite-support distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discrete<F> {
    pub values: Vec<F>,
    pub probs: Vec<F>,
}

impl<F: Field> Discrete<F> {
    pub fn new(values: Vec<F>, probs: Vec<F>) -> Result<Self> {
        let d = Self { values, probs };
        d.check()?;
        Ok(d)
    }

    pub fn point(v: F) -> Self {
        Self { values: vec![v], probs: vec![F::one()] }
    }

    pub fn uniform(values: Vec<F>) -> Self {
        let p = F::one() / F::from_count(values.len());
        let probs = vec![p; values.len()];
        Self { values, probs }
    }

    pub fn check(&self) -> Result<()> {
        if self.values.is_empty() || self.values.len() != self.probs.len() {
            return Err(Error::InvalidModel("distribution needs equally many values and probabilities".into()));
        }
        if self.probs.iter().any(|p| *p < F::zero()) {
            return Err(Error::InvalidModel("negative probability".into()));
        }
        let total = self.probs.iter().cloned().fold(F::zero(), |a, b| a + b);
        let tol = F::from_f64(1e-12).unwrap_or_else(F::zero);
        if (total - F::one()).abs() > tol {
            return Err(Error::InvalidModel("probabilities do not sum to 1".into()));
        }
        Ok(())
    }

    pub fn expect(&self, f: impl Fn(&F) -> F) -> F {
        self.values.iter().zip(&self.probs).fold(F::zero(), |acc, (v, p)| acc + f(v) * p.clone())
    }

    pub fn mean(&self) -> F {
        self.expect(|v| v.clone())
    }
}

/// Population law of `(delta, theta)` as independent marginals, plus the
/// tagged agent's own parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanFieldParams<F> {
    pub delta: Discrete<F>,
    pub theta: Discrete<F>,
    pub tagged_delta: F,
    pub tagged_theta: F,
}

impl<F: Field> MeanFieldParams<F> {
    pub fn check(&self) -> Result<()> {
        self.delta.check()?;
        self.theta.check()?;
        if self.delta.values.iter().chain(std::iter::once(&self.tagged_delta)).any(|d| *d <= F::zero()) {
            return Err(Error::InvalidModel("delta support must lie in (0, inf)".into()));
        }
        if self
            .theta
            .values
            .iter()
            .chain(std::iter::once(&self.tagged_theta))
            .any(|t| *t < F::zero() || *t > F::one())
        {
            return Err(Error::InvalidModel("theta support must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn mean_delta(&self) -> F {
        self.delta.mean()
    }

    pub fn mean_theta(&self) -> F {
        self.theta.mean()
    }

    pub fn mean_theta_one_minus_delta(&self) -> F {
        self.mean_theta() * (F::one() - self.mean_delta())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitConstants<F> {
    pub k1: F,
    pub k2: F,
    pub k3: F,
}

/// `K1 = theta_j (1 - delta_j) E[delta] / (1 - E[theta (1 - delta)]) + delta_j`,
/// `K2 = K1 (K1 - 1)`, `K3 = K1 - 1`.
pub fn limit_constants<F: Field>(p: &MeanFieldParams<F>) -> Result<LimitConstants<F>> {
    p.check()?;
    let denom = F::one() - p.mean_theta_one_minus_delta();
    if denom == F::zero() {
        return Err(Error::Singular("E[theta (1 - delta)] = 1".into()));
    }
    let k1 = p.tagged_theta.clone() * (F::one() - p.tagged_delta.clone()) * p.mean_delta() / denom
        + p.tagged_delta.clone();
    let k2 = k1.clone() * (k1.clone() - F::one());
    let k3 = k1.clone() - F::one();
    Ok(LimitConstants { k1, k2, k3 })
}

/// `delta_j + E[delta] theta_j / (1 - E[theta])`.
pub fn cara_limit_coefficient<F: Field>(p: &MeanFieldParams<F>) -> Result<F> {
    p.check()?;
    let denom = F::one() - p.mean_theta();
    if denom == F::zero() {
        return Err(Error::UnsupportedModel("the exponential-utility limit needs E[theta] < 1".into()));
    }
    Ok(p.tagged_delta.clone() + p.mean_delta() * p.tagged_theta.clone() / denom)
}

/// Limit strategy of the tagged agent.
#[derive(Debug, Clone)]
pub enum LimitStrategy<T> {
    /// `-eta~ / sigma X + coef lambda_risk / (sigma psi)`, an amount.
    Cara { coefficient: T, solution: Arc<CaraSolution<T>> },
    /// `(K1 rho + Z) / sigma`, a proportion.
    Crra { constants: LimitConstants<T>, solution: Arc<BsdeGridSolution<T>> },
}

impl<T: Real> LimitStrategy<T> {
    pub fn cara(p: &MeanFieldParams<T>, solution: Arc<CaraSolution<T>>) -> Result<Self> {
        Ok(Self::Cara { coefficient: cara_limit_coefficient(p)?, solution })
    }

    pub fn crra(p: &MeanFieldParams<T>, model: &MarketModel<T>, grid: TimeGrid<T>, numerics: &Numerics) -> Result<Self> {
        let constants = limit_constants(p)?;
        let solution = if constants.k1 == T::one() {
            BsdeGridSolution::synthetic(model, grid, |_| Process::constant(T::zero()), |_| Process::constant(T::zero()))
        } else {
            let spec = QuadraticDriverSpec::power_equilibrium(constants.k1, constants.k2, constants.k3);
            if model.is_factor() {
                let paths = simulate_paths(model, grid, numerics.n_paths, numerics.seed)?;
                solve_quadratic_regression(&spec, &paths, numerics.basis_degree)?
            } else {
                solve_closed_form(&BsdeSpec::Quadratic(spec), model, grid)?
            }
        };
        Ok(Self::Crra { constants, solution: Arc::new(solution) })
    }

    /// Wealth-free part: the CARA intercept or the CRRA proportion.
    pub fn intercept(&self, i: usize, s: &PointState<T>) -> T {
        match self {
            Self::Cara { coefficient, solution } => {
                let pt = solution.point(i, s);
                *coefficient * pt.lambda_risk() / (s.sigma * pt.psi)
            }
            Self::Crra { constants, solution } => {
                if constants.k1 == T::one() {
                    s.rho / s.sigma
                } else {
                    (constants.k1 * s.rho + solution.z(i, s)) / s.sigma
                }
            }
        }
    }

    /// Strategy at wealth `x` (ignored for the proportion form).
    pub fn strategy(&self, i: usize, s: &PointState<T>, x: T) -> T {
        match self {
            Self::Cara { solution, .. } => -solution.eta_tilde(i, s) / s.sigma * x + self.intercept(i, s),
            Self::Crra { .. } => self.intercept(i, s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub median_abs_gap_crra: f64,
    pub max_abs_gap_crra: f64,
    pub median_abs_gap_cara: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub k1: f64,
    pub cara_coefficient: Option<f64>,
    pub trials: usize,
    pub rows: Vec<ConvergenceRow>,
    pub monotone: bool,
    pub final_tolerance: f64,
    pub passed: bool,
    /// Same verdict for the exponential-utility coefficient, when defined.
    pub cara_passed: Option<bool>,
}

/// Draws `n - 1` agents i.i.d. from the population law, puts the tagged
/// agent at index 0, and compares its finite-n constants with the limit.
pub fn convergence_study(
    p: &MeanFieldParams<f64>,
    sizes: &[usize],
    trials: usize,
    seed: u64,
    final_tolerance: f64,
) -> Result<ConvergenceReport> {
    let lim = limit_constants(p)?;
    let cara_coef = cara_limit_coefficient(p).ok();
    if sizes.is_empty() || trials == 0 {
        return Err(Error::Argument("convergence study needs sizes and trials".into()));
    }
    let dd = WeightedIndex::new(&p.delta.probs).map_err(|e| Error::InvalidModel(e.to_string()))?;
    let td = WeightedIndex::new(&p.theta.probs).map_err(|e| Error::InvalidModel(e.to_string()))?;
    let mut rows = Vec::with_capacity(sizes.len());
    for (si, &n) in sizes.iter().enumerate() {
        if n < 2 {
            return Err(Error::Argument("population sizes must be at least 2".into()));
        }
        let gaps: Vec<(f64, Option<f64>)> = (0..trials)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((si * trials + k) as u64);
                let mut delta = Vec::with_capacity(n);
                let mut theta = Vec::with_capacity(n);
                delta.push(p.tagged_delta);
                theta.push(p.tagged_theta);
                for _ in 1..n {
                    delta.push(p.delta.values[dd.sample(&mut rng)]);
                    theta.push(p.theta.values[td.sample(&mut rng)]);
                }
                let params = AgentParams::new(delta, theta, vec![1.0; n])?;
                let c = compute_constants(&params)?;
                let cara_gap = cara_coef.and_then(|lc| {
                    let tb = params.theta_bar();
                    (tb < 1.0).then(|| (p.tagged_delta + params.delta_bar() * p.tagged_theta / (1.0 - tb) - lc).abs())
                });
                Ok(((c.c1[0] - lim.k1).abs(), cara_gap))
            })
            .collect::<Result<_>>()?;
        let crra: Vec<f64> = sorted_copy(&gaps.iter().map(|g| g.0).collect::<Vec<_>>());
        let cara: Option<Vec<f64>> = gaps.iter().map(|g| g.1).collect();
        rows.push(ConvergenceRow {
            n,
            median_abs_gap_crra: quantile(&crra, 0.5),
            max_abs_gap_crra: crra[crra.len() - 1],
            median_abs_gap_cara: cara.map(|v| quantile(&sorted_copy(&v), 0.5)),
        });
    }
    let monotone = rows.windows(2).all(|w| w[1].median_abs_gap_crra < w[0].median_abs_gap_crra);
    let last = &rows[rows.len() - 1];
    let passed = monotone && last.median_abs_gap_crra <= final_tolerance;
    let cara_passed = last.median_abs_gap_cara.map(|g| {
        let med: Vec<f64> = rows.iter().filter_map(|r| r.median_abs_gap_cara).collect();
        med.len() == rows.len() && med.windows(2).all(|w| w[1] < w[0]) && g <= final_tolerance
    });
    Ok(ConvergenceReport {
        k1: lim.k1,
        cara_coefficient: cara_coef,
        trials,
        rows,
        monotone,
        final_tolerance,
        passed,
        cara_passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cara::{classify_and_build_equilibrium, solve_cara_bsdes, CaraTolerances};
    use crate::Rational;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn q(a: i64, b: i64) -> Rational {
        Rational::new(a, b)
    }

    fn two_point() -> MeanFieldParams<Rational> {
        MeanFieldParams {
            delta: Discrete::point(q(2, 1)),
            theta: Discrete::uniform(vec![q(1, 5), q(4, 5)]),
            tagged_delta: q(2, 1),
            tagged_theta: q(1, 5),
        }
    }

    #[test]
    fn limit_constants_for_two_point_population() {
        let k = limit_constants(&two_point()).unwrap();
        assert_eq!(k.k1, q(26, 15));
        assert_eq!(k.k2, k.k1 * (k.k1 - 1));
        assert_eq!(k.k3, k.k1 - 1);
    }

    #[test]
    fn log_tagged_agent_has_unit_k1() {
        let mut p = two_point();
        p.tagged_delta = q(1, 1);
        assert_eq!(limit_constants(&p).unwrap().k1, q(1, 1));
        p.delta = Discrete::point(q(1, 1));
        assert_eq!(limit_constants(&p).unwrap().k1, q(1, 1));
    }

    #[test]
    fn full_competition_has_no_cara_limit() {
        let p = MeanFieldParams {
            delta: Discrete::point(1.0),
            theta: Discrete::point(1.0),
            tagged_delta: 1.0,
            tagged_theta: 1.0,
        };
        assert!(matches!(cara_limit_coefficient(&p), Err(Error::UnsupportedModel(_))));
    }

    #[test]
    fn invalid_distributions_are_rejected() {
        assert!(Discrete::new(vec![1.0, 2.0], vec![0.5, 0.6]).is_err());
        assert!(Discrete::new(vec![1.0], vec![-1.0]).is_err());
        let mut p = two_point();
        p.theta = Discrete::point(q(3, 2));
        assert!(limit_constants(&p).is_err());
    }

    #[test]
    fn symmetric_cara_limit_matches_two_agent_intercept() {
        let m = MarketModel::constant(0.0, 0.08, 0.2);
        let g = TimeGrid::new(1.0, 10).unwrap();
        let sol = Arc::new(solve_cara_bsdes(&m, g, &Numerics::default()).unwrap());
        let mf = MeanFieldParams {
            delta: Discrete::point(1.0),
            theta: Discrete::point(0.5),
            tagged_delta: 1.0,
            tagged_theta: 0.5,
        };
        let lim = LimitStrategy::cara(&mf, sol.clone()).unwrap();
        let params = AgentParams::new(vec![1.0, 1.0], vec![0.5, 0.5], vec![0.0, 0.0]).unwrap();
        let eq = classify_and_build_equilibrium(&params, sol, CaraTolerances::default()).unwrap();
        let s = m.state(0.0, 0.0);
        assert_eq!(lim.intercept(0, &s), eq.intercept(0, 0, &s));
        assert_relative_eq!(lim.intercept(0, &s), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn crra_limit_strategy_constant_market() {
        let m = MarketModel::constant(0.0, 0.08, 0.2);
        let g = TimeGrid::new(1.0, 10).unwrap();
        let mf = MeanFieldParams {
            delta: Discrete::point(2.0),
            theta: Discrete::uniform(vec![0.2, 0.8]),
            tagged_delta: 2.0,
            tagged_theta: 0.2,
        };
        let lim = LimitStrategy::crra(&mf, &m, g, &Numerics::default()).unwrap();
        let s = m.state(0.0, 0.0);
        assert_relative_eq!(lim.strategy(0, &s, 7.0), 26.0 / 15.0 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn finite_constants_converge_to_limit() {
        let mf = MeanFieldParams {
            delta: Discrete::new(vec![0.5, 1.0, 3.0], vec![0.3, 0.3, 0.4]).unwrap(),
            theta: Discrete::uniform(vec![0.1, 0.5, 0.9]),
            tagged_delta: 3.0,
            tagged_theta: 0.9,
        };
        let rep = convergence_study(&mf, &[100, 1000, 10_000], 20, 7, 0.05).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.cara_passed, Some(true), "{rep:?}");
        let again = convergence_study(&mf, &[100, 1000, 10_000], 20, 7, 0.05).unwrap();
        assert_eq!(rep, again);
    }

    fn ratio() -> impl Strategy<Value = Rational> {
        (1i64..20, 1i64..8).prop_map(|(a, b)| Rational::new(a, b))
    }

    proptest! {
        #[test]
        fn k_identities_are_exact(d in ratio(), t in 0i64..=10, td in ratio(), tt in 0i64..=10) {
            let p = MeanFieldParams {
                delta: Discrete::uniform(vec![d, q(1, 1)]),
                theta: Discrete::uniform(vec![Rational::new(t, 10), q(1, 2)]),
                tagged_delta: td,
                tagged_theta: Rational::new(tt, 10),
            };
            let k = limit_constants(&p).unwrap();
            prop_assert_eq!(k.k2, k.k1 * (k.k1 - 1));
            prop_assert_eq!(k.k3, k.k1 - 1);
        }

        #[test]
        fn exchangeable_population_matches_n_agent_constant(d in ratio(), t in 0i64..=10, n in 2usize..6) {
            let th = Rational::new(t, 10);
            let p = MeanFieldParams {
                delta: Discrete::point(d),
                theta: Discrete::point(th),
                tagged_delta: d,
                tagged_theta: th,
            };
            let params = AgentParams::new(vec![d; n], vec![th; n], vec![q(1, 1); n]).unwrap();
            let c = compute_constants(&params).unwrap();
            // Finite-n constants still depend on n via beta, but C1 does not.
            prop_assert_eq!(c.c1[0], limit_constants(&p).unwrap().k1);
        }
    }
}
