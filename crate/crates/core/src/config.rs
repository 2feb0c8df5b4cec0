//! Run configuration files.
//!
//! ```json
//! {
//!   "problem": {"affine": { ...AffineSpec... }}   or   {"game": { ...GameSpec... }},
//!   "solver": {"steps": 100, "seed": 7, "particles": 4000, "delta": 0.001, ...}
//! }
//! ```
//!
//! Every solver field is optional. Command-line flags take precedence over
//! the file, which takes precedence over the built-in defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixpoint::SchemeParams;
use crate::lqgame::GameSpec;
use crate::paths::TimeGrid;
use crate::problem::AffineSpec;
use crate::regression::RegressionBasis;

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_DEVIATIONS: usize = 20;
pub const DEFAULT_DEVIATION_MAGNITUDE: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum ProblemConfig {
    Affine(AffineSpec),
    Game(GameSpec),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub particles: Option<usize>,
    pub delta: Option<f64>,
    pub tol: Option<f64>,
    pub max_outer: Option<usize>,
    pub eps: Option<f64>,
    pub alpha: Option<f64>,
    pub rho: Option<f64>,
    pub inner_sweeps: Option<usize>,
    pub picard_inner: Option<usize>,
    pub basis: Option<RegressionBasis>,
    pub deviations: Option<usize>,
    pub deviation_magnitude: Option<f64>,
}

impl SolverConfig {
    /// `self` with every field set in `over` replaced.
    pub fn overridden_by(&self, over: &SolverConfig) -> SolverConfig {
        macro_rules! pick {
            ($($f:ident),*) => { SolverConfig { $($f: over.$f.clone().or_else(|| self.$f.clone())),* } };
        }
        pick!(
            steps,
            seed,
            particles,
            delta,
            tol,
            max_outer,
            eps,
            alpha,
            rho,
            inner_sweeps,
            picard_inner,
            basis,
            deviations,
            deviation_magnitude
        )
    }

    pub fn scheme(&self) -> Result<SchemeParams> {
        let d = SchemeParams::default();
        let p = SchemeParams {
            delta: self.delta.unwrap_or(d.delta),
            eps: self.eps.unwrap_or(d.eps),
            alpha: self.alpha.unwrap_or(d.alpha),
            rho: self.rho.unwrap_or(d.rho),
            tol: self.tol.unwrap_or(d.tol),
            max_outer: self.max_outer.unwrap_or(d.max_outer),
            inner_sweeps: self.inner_sweeps.unwrap_or(d.inner_sweeps),
            picard_inner: self.picard_inner.unwrap_or(d.picard_inner),
            particles: self.particles.unwrap_or(d.particles),
            basis: self.basis.unwrap_or(d.basis),
        };
        p.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(p)
    }

    pub fn grid(&self, horizon: f64) -> Result<TimeGrid> {
        TimeGrid::new(horizon, self.steps.unwrap_or(DEFAULT_STEPS)).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn deviations(&self) -> usize {
        self.deviations.unwrap_or(DEFAULT_DEVIATIONS)
    }

    pub fn deviation_magnitude(&self) -> Result<f64> {
        let m = self.deviation_magnitude.unwrap_or(DEFAULT_DEVIATION_MAGNITUDE);
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::Config("deviation_magnitude must be positive".into()));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl Config {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn horizon(&self) -> f64 {
        match &self.problem {
            ProblemConfig::Affine(a) => a.horizon,
            ProblemConfig::Game(g) => g.horizon,
        }
    }
}
