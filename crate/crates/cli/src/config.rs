//! Scenario configuration.

use std::path::Path;

use compete_core::cara::AgentParams;
use compete_core::market::{MarketModel, TimeGrid};
use compete_core::meanfield::MeanFieldParams;
use serde::{Deserialize, Serialize};

use crate::RunError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Utility {
    #[serde(rename = "cara")]
    Cara,
    #[serde(rename = "crra")]
    Crra,
    #[serde(rename = "meanfield-cara")]
    MeanFieldCara,
    #[serde(rename = "meanfield-crra")]
    MeanFieldCrra,
}

impl Utility {
    pub fn is_mean_field(self) -> bool {
        matches!(self, Self::MeanFieldCara | Self::MeanFieldCrra)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Equilibrium,
    Values,
    DeviationTest,
    Martingale,
    Convergence,
    DecouplingResidual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Distance of the mean competition weight from 1 treated as equality.
    pub theta: f64,
    /// Threshold on the norm of the exponential-utility risk premium.
    pub case3: f64,
    /// Relative best-response residual accepted at the equilibrium.
    pub fixed_point: f64,
    /// Bound on the decoupling residual norms.
    pub decoupling: f64,
    /// Floor of the half-width of the martingale slope interval.
    pub martingale_drift: f64,
    /// Normal quantile of the martingale slope interval.
    pub martingale_z: f64,
    /// Bound on the median finite-n gap at the largest population.
    pub convergence: f64,
    /// Largest accepted conditional strategy energy.
    pub bmo: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            theta: 1e-12,
            case3: 1e-3,
            fixed_point: 2e-2,
            decoupling: 1e-2,
            martingale_drift: 1e-4,
            martingale_z: 1.96,
            convergence: 0.05,
            bmo: 1e4,
        }
    }
}

impl Tolerances {
    fn entries(&self) -> [(&'static str, f64); 8] {
        [
            ("theta", self.theta),
            ("case3", self.case3),
            ("fixed_point", self.fixed_point),
            ("decoupling", self.decoupling),
            ("martingale_drift", self.martingale_drift),
            ("martingale_z", self.martingale_z),
            ("convergence", self.convergence),
            ("bmo", self.bmo),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub sizes: Vec<usize>,
    pub trials: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self { sizes: vec![100, 1000, 10_000], trials: 20 }
    }
}

fn default_n_paths() -> usize {
    100_000
}

fn default_degree() -> usize {
    3
}

fn default_epsilons() -> Vec<f64> {
    vec![-0.5, -0.25, -0.1, 0.1, 0.25, 0.5]
}

fn default_martingale_eps() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsConfig {
    pub horizon: f64,
    pub n_steps: usize,
    /// Paths for the backward solvers.
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    /// Paths for forward simulation; defaults to `n_paths`.
    #[serde(default)]
    pub sim_paths: Option<usize>,
    #[serde(default = "default_degree")]
    pub basis_degree: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_epsilons")]
    pub deviation_epsilons: Vec<f64>,
    /// Shift applied in the perturbed martingale check.
    #[serde(default = "default_martingale_eps")]
    pub martingale_eps: f64,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub market: MarketModel<f64>,
    /// `AgentParams` for n-agent games, `MeanFieldParams` for limits.
    pub agents: serde_json::Value,
    pub utility: Utility,
    pub numerics: NumericsConfig,
    pub analyses: Vec<Analysis>,
}

/// Agents block resolved against the utility kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Agents {
    Finite(AgentParams<f64>),
    MeanField(MeanFieldParams<f64>),
}

impl ScenarioConfig {
    pub fn from_path(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grid(&self) -> Result<TimeGrid<f64>, RunError> {
        Ok(TimeGrid::new(self.numerics.horizon, self.numerics.n_steps)?)
    }

    pub fn agents(&self) -> Result<Agents, RunError> {
        let field = |e: serde_json::Error| RunError::Config(format!("agents: {e}"));
        if self.utility.is_mean_field() {
            let p: MeanFieldParams<f64> = serde_json::from_value(self.agents.clone()).map_err(field)?;
            p.check()?;
            Ok(Agents::MeanField(p))
        } else {
            let p: AgentParams<f64> = serde_json::from_value(self.agents.clone()).map_err(field)?;
            p.check()?;
            Ok(Agents::Finite(p))
        }
    }

    /// Requested analyses in dependency order, without repeats.
    pub fn ordered_analyses(&self) -> Vec<Analysis> {
        let mut a = self.analyses.clone();
        a.sort();
        a.dedup();
        a
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let n = &self.numerics;
        for (name, v) in n.tolerances.entries() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RunError::Config(format!("tolerance {name} must be positive, got {v}")));
            }
        }
        if !(n.martingale_eps != 0.0 && n.martingale_eps.is_finite()) {
            return Err(RunError::Config("martingale_eps must be a nonzero finite shift".into()));
        }
        if n.deviation_epsilons.iter().any(|e| !e.is_finite()) {
            return Err(RunError::Config("deviation_epsilons must be finite".into()));
        }
        if n.n_paths < 2 || n.sim_paths.is_some_and(|p| p < 2) {
            return Err(RunError::Config("path counts must be at least 2".into()));
        }
        if n.convergence.trials == 0 || n.convergence.sizes.iter().any(|&s| s < 2) {
            return Err(RunError::Config("convergence needs trials >= 1 and sizes >= 2".into()));
        }
        if self.analyses.is_empty() {
            return Err(RunError::Config("analyses must not be empty".into()));
        }
        self.grid()?;
        self.agents()?;
        for a in &self.analyses {
            let ok = match a {
                Analysis::Equilibrium => true,
                Analysis::Convergence => self.utility.is_mean_field(),
                Analysis::DecouplingResidual => self.utility == Utility::Crra,
                Analysis::Values | Analysis::DeviationTest | Analysis::Martingale => !self.utility.is_mean_field(),
            };
            if !ok {
                return Err(RunError::Config(format!("analysis {a:?} does not apply to utility {:?}", self.utility)));
            }
        }
        Ok(())
    }
}
