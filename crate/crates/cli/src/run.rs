//! Orchestration of the requested analyses.

use std::sync::Arc;

use compete_core::bsde::{BsdeGridSolution, Numerics};
use compete_core::cara::{
    classify_and_build_equilibrium, solve_cara_bsdes, value_cara, AgentParams, CaraEquilibrium,
    CaraTolerances, Classification,
};
use compete_core::crra::{
    best_response_crra, bmo_proxy, decoupling_residual, log_value_solution, solve_equilibrium_crra,
    solve_value_bsdes, CrraBestResponse,
};
use compete_core::market::{simulate_paths, validate_model, MarketModel, MarketPaths, PointState, TimeGrid};
use compete_core::meanfield::{cara_limit_coefficient, convergence_study, limit_constants, LimitStrategy, MeanFieldParams};
use compete_core::sim::{
    cara_deterministic_loss, cara_strategies, crra_strategies, deviation_test, martingale_diagnostic,
    simulate_wealth, write_martingale_csv, Deflator, MartingaleReport, StrategyProcess, UtilityKind,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Agents, Analysis, ScenarioConfig, Utility};
use crate::report::{Bundle, Verdict};
use crate::RunError;

/// Mixed into the seed for forward simulation so it never reuses the
/// regression sample.
const SIM_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
/// Paths used for residual checks, BMO proxies and path dumps.
const PROBE_PATHS: usize = 200;
const DUMP_PATHS: usize = 1000;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub dump_paths: bool,
}

struct Ctx<'a> {
    cfg: &'a ScenarioConfig,
    model: MarketModel<f64>,
    grid: TimeGrid<f64>,
    numerics: Numerics,
    analyses: Vec<Analysis>,
    bundle: Bundle,
    equilibrium: serde_json::Map<String, Value>,
}

impl Ctx<'_> {
    fn wants(&self, a: Analysis) -> bool {
        self.analyses.contains(&a)
    }

    fn seed(&self) -> u64 {
        self.numerics.seed
    }

    fn sim_paths(&self) -> Result<MarketPaths<f64>, RunError> {
        let n = self.cfg.numerics.sim_paths.unwrap_or(self.cfg.numerics.n_paths);
        Ok(simulate_paths(&self.model, self.grid, n, self.seed() ^ SIM_STREAM)?)
    }

    fn probe_paths(&self, n: usize) -> Result<MarketPaths<f64>, RunError> {
        Ok(simulate_paths(&self.model, self.grid, n, self.seed() ^ SIM_STREAM)?)
    }

    fn verdict(&mut self, name: impl Into<String>, passed: bool) {
        self.bundle.verdicts.push(Verdict { name: name.into(), passed });
    }

    fn put(&mut self, key: &str, v: impl Serialize) -> Result<(), RunError> {
        self.equilibrium.insert(key.into(), to_value(v)?);
        Ok(())
    }

    /// State on the mean factor path at `t`.
    fn reference_state(&self, t: f64) -> PointState<f64> {
        let f = match self.model.factor_model() {
            Some(f) => f.mean + (f.f0 - f.mean) * (-f.kappa * t).exp(),
            None => 0.0,
        };
        self.model.state(t, f)
    }

    fn dump_solution(&mut self, name: &str, sol: &BsdeGridSolution<f64>, paths: &MarketPaths<f64>) -> Result<(), RunError> {
        let mut buf = Vec::new();
        sol.write_summary_csv(paths, &mut buf).map_err(|e| RunError::Io(e.to_string()))?;
        self.bundle.add_text(name, buf);
        Ok(())
    }
}

fn to_value(v: impl Serialize) -> Result<Value, RunError> {
    serde_json::to_value(v).map_err(|e| RunError::Io(e.to_string()))
}

/// Runs every requested analysis and collects the reports.
pub fn run(config: &ScenarioConfig, opts: &RunOptions) -> Result<Bundle, RunError> {
    let mut cfg = config.clone();
    if let Some(s) = opts.seed {
        cfg.numerics.seed = s;
    }
    cfg.validate()?;
    let validation = validate_model(&cfg.market)?.into_result()?;
    let grid = cfg.grid()?;
    let numerics =
        Numerics { n_paths: cfg.numerics.n_paths, basis_degree: cfg.numerics.basis_degree, seed: cfg.numerics.seed };
    let mut ctx = Ctx {
        cfg: &cfg,
        model: cfg.market.clone(),
        grid,
        numerics,
        analyses: cfg.ordered_analyses(),
        bundle: Bundle::default(),
        equilibrium: serde_json::Map::new(),
    };
    ctx.put(
        "provenance",
        json!({
            "tool": "compete",
            "version": env!("CARGO_PKG_VERSION"),
            "core_version": compete_core::VERSION,
            "seed": cfg.numerics.seed,
            "simulation_seed": cfg.numerics.seed ^ SIM_STREAM,
            "config": &cfg,
        }),
    )?;
    ctx.put("market_validation", &validation)?;
    if opts.dump_paths {
        let paths = ctx.probe_paths(DUMP_PATHS.min(cfg.numerics.sim_paths.unwrap_or(cfg.numerics.n_paths)))?;
        let mut buf = Vec::new();
        paths.write_csv(&mut buf).map_err(|e| RunError::Io(e.to_string()))?;
        ctx.bundle.add_text("paths.csv", buf);
    }
    match cfg.agents()? {
        Agents::Finite(p) => match cfg.utility {
            Utility::Cara => run_cara(&mut ctx, &p, opts)?,
            Utility::Crra => run_crra(&mut ctx, &p, opts)?,
            _ => unreachable!("validated utility"),
        },
        Agents::MeanField(p) => run_mean_field(&mut ctx, &p)?,
    }
    let verdicts = ctx.bundle.verdicts.clone();
    ctx.put("verdicts", &verdicts)?;
    let eq = Value::Object(std::mem::take(&mut ctx.equilibrium));
    ctx.bundle.add_json("equilibrium.json", eq);
    Ok(ctx.bundle)
}

fn run_cara(ctx: &mut Ctx, p: &AgentParams<f64>, opts: &RunOptions) -> Result<(), RunError> {
    let tol = &ctx.cfg.numerics.tolerances;
    let sol = Arc::new(solve_cara_bsdes(&ctx.model, ctx.grid, &ctx.numerics)?);
    let eq = Arc::new(classify_and_build_equilibrium(
        p,
        sol.clone(),
        CaraTolerances { theta: tol.theta, case3: tol.case3 },
    )?);
    let strategies = cara_strategies(&eq, p.n());
    let s0 = sol.log_psi.initial_state();
    let series_len = if strategies.is_some() { ctx.grid.n_steps + 1 } else { 0 };
    let series: Vec<Value> = (0..series_len)
        .map(|i| {
            let s = ctx.reference_state(ctx.grid.t(i));
            json!({
                "t": s.t,
                "factor": s.factor,
                "slope": eq.slope(i, &s),
                "intercepts": (0..p.n()).map(|j| eq.intercept(j, i, &s)).collect::<Vec<_>>(),
                "strategy_at_x0": (0..p.n()).map(|j| eq.strategy(j, i, &s, &p.x0)).collect::<Vec<_>>(),
            })
        })
        .collect();
    ctx.put(
        "equilibrium",
        json!({
            "utility": "cara",
            "classification": eq.classification,
            "theta_bar": eq.theta_bar,
            "delta_bar": eq.delta_bar,
            "risk_premium_l2": eq.lambda_l2,
            "intercept_coefficients": &eq.intercept_coef,
            "family": &eq.family,
            "notes": &eq.notes,
            "scheme": sol.log_psi.scheme,
            "psi0": sol.psi0(),
            "phi0": sol.phi0(),
            "strategy_t0": (0..p.n()).map(|j| eq.strategy(j, 0, &s0, &p.x0)).collect::<Vec<_>>(),
            "series": series,
        }),
    )?;
    if opts.dump_paths {
        let paths = ctx.probe_paths(DUMP_PATHS)?;
        ctx.dump_solution("bsde_log_psi.csv", &sol.log_psi, &paths)?;
        ctx.dump_solution("bsde_phi.csv", &sol.phi, &paths)?;
    }
    if let Some(st) = strategies.as_ref().filter(|_| ctx.wants(Analysis::Equilibrium)) {
        let probe = ctx.probe_paths(PROBE_PATHS)?;
        let w = simulate_wealth(UtilityKind::Cara, st, &probe, &p.x0)?;
        let samples = (0..probe.n_paths())
            .flat_map(|q| (0..ctx.grid.n_steps).map(move |i| (q, i)))
            .map(|(q, i)| (i, probe.state(q, i), w.at(q, i)));
        let residual = eq.fixed_point_residual(p, samples)?;
        let passed = residual <= tol.fixed_point;
        ctx.put("fixed_point", json!({ "max_abs_residual": residual, "tolerance": tol.fixed_point, "passed": passed }))?;
        ctx.verdict("fixed_point", passed);
    }
    if ctx.wants(Analysis::Values) {
        let v = if eq.classification == Classification::None { Vec::new() } else { value_cara(p, &sol) };
        ctx.put("values", json!({ "v1": v, "defined": eq.classification != Classification::None }))?;
    }
    let Some(strategies) = strategies else {
        if ctx.wants(Analysis::DeviationTest) || ctx.wants(Analysis::Martingale) {
            ctx.put("skipped", json!({ "reason": "no Nash equilibrium exists for this scenario" }))?;
        }
        return Ok(());
    };
    let paths = if ctx.wants(Analysis::DeviationTest) || ctx.wants(Analysis::Martingale) {
        Some(ctx.sim_paths()?)
    } else {
        None
    };
    if let (true, Some(paths)) = (ctx.wants(Analysis::DeviationTest), paths.as_ref()) {
        let loss = cara_loss_predictor(ctx, p, &eq);
        let mut agents = Vec::new();
        for j in 0..p.n() {
            let rep = deviation_test(&strategies, j, &ctx.cfg.numerics.deviation_epsilons, paths, p, UtilityKind::Cara)?;
            ctx.verdict(format!("deviation_agent_{j}"), rep.passed);
            let predicted: Vec<Value> = loss
                .as_ref()
                .map(|f| rep.symmetric.iter().map(|s| json!({ "abs_eps": s.abs_eps, "predicted_loss": f(j, s.abs_eps) })).collect())
                .unwrap_or_default();
            agents.push(json!({ "report": rep, "closed_form_loss": predicted }));
        }
        ctx.bundle.add_json("deviation.json", json!({ "utility": "cara", "agents": agents }));
    }
    if let (true, Some(paths)) = (ctx.wants(Analysis::Martingale), paths.as_ref()) {
        let deflators: Vec<Deflator<f64>> = (0..p.n())
            .map(|j| Deflator::Cara { solution: sol.clone(), delta: p.delta[j], theta: p.theta[j] })
            .collect();
        martingale_section(ctx, UtilityKind::Cara, &strategies, paths, p, &deflators)?;
    }
    Ok(())
}

type LossFn = Box<dyn Fn(usize, f64) -> f64>;

/// Closed-form deviation loss, available when the coefficients are constant.
fn cara_loss_predictor(
    ctx: &Ctx,
    p: &AgentParams<f64>,
    eq: &CaraEquilibrium<f64>,
) -> Option<LossFn> {
    let MarketModel::Constant { r, sigma, .. } = ctx.model else {
        return None;
    };
    if eq.classification != Classification::Unique {
        return None;
    }
    let horizon = ctx.grid.horizon;
    let psi_sq = if r == 0.0 { horizon } else { ((2.0 * r * horizon).exp() - 1.0) / (2.0 * r) };
    let (values, delta, theta, n) = (eq.values.clone(), p.delta.clone(), p.theta.clone(), p.n());
    Some(Box::new(move |j, eps| cara_deterministic_loss(values[j], sigma, n, delta[j], theta[j], eps, psi_sq)))
}

fn martingale_section(
    ctx: &mut Ctx,
    kind: UtilityKind,
    strategies: &[StrategyProcess<f64>],
    paths: &MarketPaths<f64>,
    p: &AgentParams<f64>,
    deflators: &[Deflator<f64>],
) -> Result<(), RunError> {
    let tol = ctx.cfg.numerics.tolerances.clone();
    let eps = ctx.cfg.numerics.martingale_eps;
    let base = simulate_wealth(kind, strategies, paths, &p.x0)?;
    let mut reports: Vec<(String, MartingaleReport)> = Vec::new();
    for (j, d) in deflators.iter().enumerate() {
        let r = martingale_diagnostic(&base, paths, j, d, tol.martingale_z, tol.martingale_drift)?;
        ctx.verdict(format!("martingale_equilibrium_agent_{j}"), r.passed);
        reports.push(("equilibrium".into(), r));
        let mut dev = strategies.to_vec();
        dev[j] = strategies[j].shifted(eps);
        let w = simulate_wealth(kind, &dev, paths, &p.x0)?;
        let r = martingale_diagnostic(&w, paths, j, d, tol.martingale_z, tol.martingale_drift)?;
        // The perturbed check passes when the drift is detected.
        ctx.verdict(format!("martingale_perturbed_agent_{j}"), !r.passed);
        reports.push((format!("perturbed_{eps}"), r));
    }
    let labelled: Vec<(&str, &MartingaleReport)> = reports.iter().map(|(l, r)| (l.as_str(), r)).collect();
    let mut buf = Vec::new();
    write_martingale_csv(&labelled, &mut buf).map_err(|e| RunError::Io(e.to_string()))?;
    ctx.bundle.add_text("martingale.csv", buf);
    let summary: Vec<Value> = reports
        .iter()
        .map(|(l, r)| {
            json!({
                "case": l,
                "agent": r.agent,
                "slope": r.slope,
                "slope_se": r.slope_se,
                "ci": r.ci,
                "drift_tolerance": r.drift_tolerance,
                "contains_zero": r.passed,
                "overflow_count": r.overflow_count,
                "scale": r.scale,
                "note": &r.note,
            })
        })
        .collect();
    ctx.put("martingale", summary)
}

fn run_crra(ctx: &mut Ctx, p: &AgentParams<f64>, opts: &RunOptions) -> Result<(), RunError> {
    let tol = ctx.cfg.numerics.tolerances.clone();
    let eq = solve_equilibrium_crra(p, &ctx.model, ctx.grid, &ctx.numerics)?;
    let series: Vec<Value> = (0..=ctx.grid.n_steps)
        .map(|i| {
            let s = ctx.reference_state(ctx.grid.t(i));
            json!({
                "t": s.t,
                "factor": s.factor,
                "strategies": (0..p.n()).map(|j| eq.strategy(j, i, &s)).collect::<Vec<_>>(),
            })
        })
        .collect();
    let s0 = eq.solutions[0].initial_state();
    ctx.put(
        "equilibrium",
        json!({
            "utility": "crra",
            "constants": &eq.constants,
            "schemes": eq.solutions.iter().map(|s| s.scheme).collect::<Vec<_>>(),
            "y0": eq.solutions.iter().map(|s| s.y0()).collect::<Vec<_>>(),
            "strategy_t0": (0..p.n()).map(|j| eq.strategy(j, 0, &s0)).collect::<Vec<_>>(),
            "series": series,
        }),
    )?;
    if opts.dump_paths {
        let paths = ctx.probe_paths(DUMP_PATHS)?;
        for (j, sol) in eq.solutions.iter().enumerate() {
            ctx.dump_solution(&format!("bsde_agent_{j}.csv"), sol, &paths)?;
        }
    }
    let opponents = eq.strategy_processes();
    let needs_br = ctx.wants(Analysis::Equilibrium) || ctx.wants(Analysis::Martingale);
    let mut responses: Vec<Option<Arc<CrraBestResponse<f64>>>> = vec![None; p.n()];
    if needs_br {
        for (j, slot) in responses.iter_mut().enumerate() {
            if !eq.constants.is_log(j) {
                *slot = Some(Arc::new(best_response_crra(j, p, &opponents, &ctx.model, ctx.grid, &ctx.numerics)?));
            }
        }
    }
    if ctx.wants(Analysis::Equilibrium) {
        let probe = ctx.probe_paths(PROBE_PATHS)?;
        let mut worst = 0.0f64;
        for (j, br) in responses.iter().enumerate() {
            for q in 0..probe.n_paths() {
                for i in 0..ctx.grid.n_steps {
                    let s = probe.state(q, i);
                    let pi = eq.strategy(j, i, &s);
                    let b = match br {
                        Some(br) => br.strategy(i, &s),
                        None => s.rho / s.sigma,
                    };
                    worst = worst.max((b - pi).abs() / pi.abs().max(1.0));
                }
            }
        }
        let passed = worst <= tol.fixed_point;
        ctx.put("fixed_point", json!({ "max_rel_residual": worst, "tolerance": tol.fixed_point, "passed": passed }))?;
        ctx.verdict("fixed_point", passed);
        let bmo: Vec<f64> =
            opponents.iter().map(|s| bmo_proxy(s, &probe, ctx.numerics.basis_degree)).collect::<Result<_, _>>()?;
        let passed = bmo.iter().all(|&b| b.is_finite() && b <= tol.bmo);
        ctx.put("bmo_proxy", json!({ "energy": bmo, "threshold": tol.bmo, "passed": passed,
            "note": "conditional energy on deterministic grid times only" }))?;
        ctx.verdict("bmo_proxy", passed);
    }
    if ctx.wants(Analysis::Values) {
        let v = solve_value_bsdes(p, &eq, &ctx.model, ctx.grid, &ctx.numerics)?;
        ctx.put("values", v)?;
    }
    if ctx.wants(Analysis::DecouplingResidual) {
        let rep = if ctx.model.is_factor() {
            let probe = ctx.probe_paths(PROBE_PATHS * 10)?;
            decoupling_residual(&eq, Some(&probe))
        } else {
            decoupling_residual(&eq, None)
        };
        let worst = rep.fixed_point_max.max(rep.system_max).max(rep.coupled_l2).max(rep.aggregate_l2);
        let passed = worst <= tol.decoupling;
        ctx.put("decoupling_residual", json!({ "report": rep, "tolerance": tol.decoupling, "passed": passed }))?;
        ctx.verdict("decoupling_residual", passed);
    }
    let strategies = crra_strategies(&eq);
    let paths = if ctx.wants(Analysis::DeviationTest) || ctx.wants(Analysis::Martingale) {
        Some(ctx.sim_paths()?)
    } else {
        None
    };
    if let (true, Some(paths)) = (ctx.wants(Analysis::DeviationTest), paths.as_ref()) {
        let mut agents = Vec::new();
        for j in 0..p.n() {
            let rep = deviation_test(&strategies, j, &ctx.cfg.numerics.deviation_epsilons, paths, p, UtilityKind::Crra)?;
            ctx.verdict(format!("deviation_agent_{j}"), rep.passed);
            agents.push(json!({ "report": rep }));
        }
        ctx.bundle.add_json("deviation.json", json!({ "utility": "crra", "agents": agents }));
    }
    if let (true, Some(paths)) = (ctx.wants(Analysis::Martingale), paths.as_ref()) {
        let mut deflators = Vec::with_capacity(p.n());
        for (j, br) in responses.iter().enumerate() {
            deflators.push(match br {
                Some(br) => Deflator::Power { response: br.clone() },
                None => Deflator::Log {
                    constants: eq.constants.clone(),
                    j,
                    value: Arc::new(log_value_solution(&eq.constants, j, &opponents, &ctx.model, ctx.grid, &ctx.numerics)?),
                },
            });
        }
        martingale_section(ctx, UtilityKind::Crra, &strategies, paths, p, &deflators)?;
    }
    Ok(())
}

fn run_mean_field(ctx: &mut Ctx, p: &MeanFieldParams<f64>) -> Result<(), RunError> {
    let tol = ctx.cfg.numerics.tolerances.clone();
    let (limit, constants) = match ctx.cfg.utility {
        Utility::MeanFieldCara => {
            let sol = Arc::new(solve_cara_bsdes(&ctx.model, ctx.grid, &ctx.numerics)?);
            let c = cara_limit_coefficient(p)?;
            (LimitStrategy::cara(p, sol)?, json!({ "intercept_coefficient": c }))
        }
        _ => (LimitStrategy::crra(p, &ctx.model, ctx.grid, &ctx.numerics)?, to_value(limit_constants(p)?)?),
    };
    let series: Vec<Value> = (0..=ctx.grid.n_steps)
        .map(|i| {
            let s = ctx.reference_state(ctx.grid.t(i));
            json!({ "t": s.t, "factor": s.factor, "intercept": limit.intercept(i, &s) })
        })
        .collect();
    ctx.put(
        "equilibrium",
        json!({
            "utility": ctx.cfg.utility,
            "mean_delta": p.mean_delta(),
            "mean_theta": p.mean_theta(),
            "mean_theta_one_minus_delta": p.mean_theta_one_minus_delta(),
            "limit": constants,
            "series": series,
        }),
    )?;
    if ctx.wants(Analysis::Convergence) {
        let c = &ctx.cfg.numerics.convergence;
        let rep = convergence_study(p, &c.sizes, c.trials, ctx.seed(), tol.convergence)?;
        let passed = match ctx.cfg.utility {
            Utility::MeanFieldCara => rep.cara_passed.unwrap_or(false),
            _ => rep.passed,
        };
        ctx.verdict("convergence", passed);
        ctx.bundle.add_json("convergence.json", json!({ "utility": ctx.cfg.utility, "report": rep, "passed": passed }));
    }
    Ok(())
}
