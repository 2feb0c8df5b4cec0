//! The outer measure-freezing iteration.
//!
//! Iterate `n + 1` solves a standard FBSDE in which the law arguments are
//! frozen at iterate `n` and the forward equation carries the regularizing
//! terms `-δ(Y^{n+1} - Y^n)` and `-δ(Z^{n+1} - Z^n)`. The iteration starts
//! from the zero triple and is monitored through the Cauchy gap
//! `E|ΔX_T|² + E∫‖ΔU‖² dt`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backward::{solve_backward_coupled, DecouplingField, StepReport};
use crate::error::{Error, Result};
use crate::forward::{propagate, propagate_field, Perturbation};
use crate::measure::EmpiricalMeasure;
use crate::paths::{joint_marginal, make_bundle, marginal, BrownianBundle, PathEnsemble, TimeGrid};
use crate::problem::{contraction_constants, MfProblem, State, YoungParams};
use crate::regression::RegressionBasis;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeParams {
    pub delta: f64,
    pub eps: f64,
    pub alpha: f64,
    pub rho: f64,
    /// Stop once the Cauchy gap drops below `tol²`.
    pub tol: f64,
    pub max_outer: usize,
    pub inner_sweeps: usize,
    pub picard_inner: usize,
    pub particles: usize,
    pub basis: RegressionBasis,
}

impl Default for SchemeParams {
    fn default() -> Self {
        Self {
            delta: 1e-3,
            eps: 1.0,
            alpha: std::f64::consts::FRAC_1_SQRT_2,
            rho: 1.0,
            tol: 1e-3,
            max_outer: 50,
            inner_sweeps: 2,
            picard_inner: 1,
            particles: 2000,
            basis: RegressionBasis::default(),
        }
    }
}

impl SchemeParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.into()));
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad("delta must be nonnegative");
        }
        if !(self.eps > 0.0 && self.alpha > 0.0 && self.rho > 0.0) {
            return bad("eps, alpha, rho must be positive");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if self.max_outer == 0 {
            return bad("max_outer must be at least 1");
        }
        if self.inner_sweeps == 0 || self.picard_inner == 0 {
            return bad("inner_sweeps and picard_inner must be at least 1");
        }
        if self.particles == 0 {
            return bad("particles must be positive");
        }
        Ok(())
    }

    fn young(&self) -> YoungParams {
        YoungParams { eps: self.eps, alpha: self.alpha, rho: self.rho, delta: self.delta }
    }
}

/// Diagnostics of one outer step; `n` counts produced iterates from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub n: usize,
    #[serde(rename = "gap_XT")]
    pub gap_xt: f64,
    #[serde(rename = "gap_U")]
    pub gap_u: f64,
    pub ratio: Option<f64>,
    pub theory_ratio: Option<f64>,
    pub regression_residual: f64,
    pub ridge_steps: usize,
}

impl IterationRecord {
    pub fn gap(&self) -> f64 {
        self.gap_xt + self.gap_u
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    /// Per-step regression report of the last backward sweep.
    pub residual_report: Vec<StepReport>,
}

impl IterationDiagnostics {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.history {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// A triple `(X, Y, Z)` of path ensembles; `Z` has one entry per node with
/// the last node repeating the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub x: PathEnsemble,
    pub y: PathEnsemble,
    pub z: PathEnsemble,
}

impl Iterate {
    pub fn zeros(p: &MfProblem, grid: &TimeGrid, particles: usize) -> Self {
        Self {
            x: PathEnsemble::zeros(particles, grid.nodes(), p.state_dim),
            y: PathEnsemble::zeros(particles, grid.nodes(), p.state_dim),
            z: PathEnsemble::zeros(particles, grid.nodes(), p.z_len()),
        }
    }

    /// Joint `(X, Y)` clouds at every node.
    pub fn flow(&self) -> Result<Vec<EmpiricalMeasure>> {
        (0..self.x.nodes()).map(|k| joint_marginal(&self.x, &self.y, k)).collect()
    }

    pub fn terminal_law(&self) -> Result<EmpiricalMeasure> {
        marginal(&self.x, self.x.nodes() - 1, 0..self.x.dim())
    }
}

#[derive(Debug, Clone)]
pub struct MfSolution {
    pub grid: TimeGrid,
    pub bundle: BrownianBundle,
    pub x: PathEnsemble,
    pub y: PathEnsemble,
    pub z: PathEnsemble,
    pub flow: Vec<EmpiricalMeasure>,
    pub terminal_law: EmpiricalMeasure,
    pub field: Option<DecouplingField>,
    pub diagnostics: IterationDiagnostics,
}

impl MfSolution {
    /// Wraps given paths, computing the flow from them.
    pub fn from_iterate(grid: TimeGrid, bundle: BrownianBundle, it: Iterate) -> Result<Self> {
        let flow = it.flow()?;
        let terminal_law = it.terminal_law()?;
        Ok(Self {
            grid,
            bundle,
            x: it.x,
            y: it.y,
            z: it.z,
            flow,
            terminal_law,
            field: None,
            diagnostics: IterationDiagnostics { history: Vec::new(), converged: false, residual_report: Vec::new() },
        })
    }

    pub fn converged(&self) -> bool {
        self.diagnostics.converged
    }

    pub fn iterate(&self) -> Iterate {
        Iterate { x: self.x.clone(), y: self.y.clone(), z: self.z.clone() }
    }
}

/// `(Ê|ΔX_T|², Ê∫‖ΔU‖² dt)`: trapezoidal in time for `X`, `Y` and left
/// points for `Z`.
pub fn cauchy_gap(grid: &TimeGrid, a: &Iterate, b: &Iterate) -> (f64, f64) {
    let last = grid.steps();
    let dt = grid.dt();
    let gap_xt = a.x.mean_sq_diff_at(&b.x, last);
    let mut gap_u = 0.0;
    for k in 0..=last {
        let w = if k == 0 || k == last { 0.5 } else { 1.0 };
        gap_u += w * dt * (a.x.mean_sq_diff_at(&b.x, k) + a.y.mean_sq_diff_at(&b.y, k));
        if k < last {
            gap_u += dt * a.z.mean_sq_diff_at(&b.z, k);
        }
    }
    (gap_xt, gap_u)
}

fn is_breakdown(e: &Error) -> bool {
    matches!(e, Error::NumericalBreakdown { .. } | Error::NonFinite(_) | Error::NotPositiveDefinite(_))
}

fn diverging(history: &[IterationRecord]) -> bool {
    let n = history.len();
    let last = history.last().map(IterationRecord::gap).unwrap_or(0.0);
    if !last.is_finite() || last > 1e30 {
        return true;
    }
    if n < 4 {
        return false;
    }
    let g: Vec<f64> = history[n - 4..].iter().map(IterationRecord::gap).collect();
    g[1] > g[0] && g[2] > g[1] && g[3] > g[2] && g[3] > 10.0 * g[0]
}

/// Runs the scheme from the zero triple.
pub fn solve(p: &MfProblem, grid: &TimeGrid, params: &SchemeParams, seed: u64) -> Result<MfSolution> {
    solve_from(p, grid, params, seed, None, |_| {})
}

/// Runs the scheme from `start` (zero triple when `None`), calling `observe`
/// after every outer step.
///
/// Divergence (three consecutive gap increases by more than a factor 10
/// overall, or a numerical breakdown) returns [`Error::Diverged`]; running
/// out of outer steps returns a solution with `converged == false`.
pub fn solve_from(
    p: &MfProblem,
    grid: &TimeGrid,
    params: &SchemeParams,
    seed: u64,
    start: Option<Iterate>,
    mut observe: impl FnMut(&IterationRecord),
) -> Result<MfSolution> {
    params.validate()?;
    if (grid.horizon() - p.horizon).abs() > 1e-12 * p.horizon.max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "grid horizon {} differs from problem horizon {}",
            grid.horizon(),
            p.horizon
        )));
    }
    let n = params.particles;
    let bundle = make_bundle(grid, n, p.noise_dim, seed)?;
    let mut cur = start.unwrap_or_else(|| Iterate::zeros(p, grid, n));
    if cur.x.particles() != n || cur.x.nodes() != grid.nodes() || cur.z.dim() != p.z_len() || cur.y.dim() != p.state_dim {
        return Err(Error::ShapeMismatch("warm start does not match grid, particles or dimensions".into()));
    }
    let theory_ratio = match (p.lipschitz, p.monotonicity) {
        (Some(l), Some(m)) if params.delta > 0.0 => contraction_constants(&l, &m, params.young())?.ratio(),
        _ => None,
    };

    let mut field: Option<DecouplingField> = None;
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut report = Vec::new();
    let mut converged = false;
    for outer in 1..=params.max_outer {
        let step = outer_step(p, grid, &bundle, params, &cur, field.as_ref());
        let (next, new_field, steps) = match step {
            Ok(v) => v,
            Err(e) if is_breakdown(&e) => return Err(Error::Diverged { history }),
            Err(e) => return Err(e),
        };
        let (gap_xt, gap_u) = cauchy_gap(grid, &next, &cur);
        let gap = gap_xt + gap_u;
        let ratio = history.last().map(|r| gap / r.gap());
        let rec = IterationRecord {
            n: outer,
            gap_xt,
            gap_u,
            ratio,
            theory_ratio,
            regression_residual: steps.iter().map(|s| s.y_residual.max(s.z_residual)).fold(0.0, f64::max),
            ridge_steps: steps.iter().filter(|s| s.ridge).count(),
        };
        observe(&rec);
        history.push(rec);
        if diverging(&history) {
            return Err(Error::Diverged { history });
        }
        cur = next;
        field = Some(new_field);
        report = steps;
        if gap < params.tol * params.tol {
            converged = true;
            break;
        }
    }
    let flow = cur.flow()?;
    let terminal_law = cur.terminal_law()?;
    Ok(MfSolution {
        grid: *grid,
        bundle,
        x: cur.x,
        y: cur.y,
        z: cur.z,
        flow,
        terminal_law,
        field,
        diagnostics: IterationDiagnostics { history, converged, residual_report: report },
    })
}

type OuterOutput = (Iterate, DecouplingField, Vec<StepReport>);

fn outer_step(
    p: &MfProblem,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    params: &SchemeParams,
    prev: &Iterate,
    field: Option<&DecouplingField>,
) -> Result<OuterOutput> {
    let flow = prev.flow()?;
    let mu = prev.terminal_law()?;
    let pert = Perturbation { delta: params.delta, y_prev: &prev.y, z_prev: &prev.z };
    let mut it = match field {
        Some(f) => {
            let (x, y, z) = propagate_field(p, grid, bundle, f, &flow, &mu, Some(pert))?;
            Iterate { x, y, z }
        }
        None => {
            let x = propagate(p, grid, bundle, &prev.y, &prev.z, &prev.y, &prev.z, &flow, params.delta)?;
            Iterate { x, y: prev.y.clone(), z: prev.z.clone() }
        }
    };
    let mut last = None;
    for _ in 0..params.inner_sweeps {
        let back = solve_backward_coupled(
            p,
            grid,
            bundle,
            &it.x,
            &it.y,
            &it.z,
            &flow,
            &mu,
            &params.basis,
            params.picard_inner,
            Some(pert),
        )?;
        let (x, y, z) = propagate_field(p, grid, bundle, &back.field, &flow, &mu, Some(pert))?;
        it = Iterate { x, y, z };
        last = Some((back.field, back.steps));
    }
    let (f, steps) = last.expect("inner_sweeps >= 1");
    Ok((it, f, steps))
}

/// Self-consistency of a solution under its own flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `max_k Ê|X_{k+1} - X_k - fΔt - σΔW|²`
    pub forward: f64,
    /// `max_k Ê|Y_{k+1} - Y_k - hΔt - ZΔW|²`
    pub backward: f64,
    /// `Ê|Y_N - g(X_N, μ_T)|²`
    pub terminal: f64,
}

pub fn residual(p: &MfProblem, sol: &MfSolution) -> Residuals {
    let grid = &sol.grid;
    let (n, m, zl, d) = (sol.x.particles(), p.state_dim, p.z_len(), p.noise_dim);
    let dt = grid.dt();
    let mut forward = 0.0f64;
    let mut backward = 0.0f64;
    let mut f = vec![0.0; m];
    let mut s = vec![0.0; zl];
    let mut h = vec![0.0; m];
    for k in 0..grid.steps() {
        let t = grid.time(k);
        let law = &sol.flow[k];
        let (mut fw, mut bw) = (0.0, 0.0);
        for i in 0..n {
            let u = State { x: sol.x.get(i, k), y: sol.y.get(i, k), z: sol.z.get(i, k) };
            let dw = sol.bundle.increment(i, k);
            f.fill(0.0);
            s.fill(0.0);
            h.fill(0.0);
            p.coefficients.drift(t, u, law, &mut f);
            p.coefficients.diffusion(t, u, p.diffusion_law(law), &mut s);
            p.coefficients.driver(t, u, law, &mut h);
            let (xn, yn) = (sol.x.get(i, k + 1), sol.y.get(i, k + 1));
            for a in 0..m {
                let noise: f64 = (0..d).map(|b| s[a * d + b] * dw[b]).sum();
                let zdw: f64 = (0..d).map(|b| u.z[a * d + b] * dw[b]).sum();
                fw += (xn[a] - u.x[a] - f[a] * dt - noise).powi(2);
                bw += (yn[a] - u.y[a] - h[a] * dt - zdw).powi(2);
            }
        }
        forward = forward.max(fw / n as f64);
        backward = backward.max(bw / n as f64);
    }
    let last = grid.steps();
    let mut terminal = 0.0;
    let mut g = vec![0.0; m];
    for i in 0..n {
        g.fill(0.0);
        p.coefficients.terminal(sol.x.get(i, last), &sol.terminal_law, &mut g);
        terminal += sol.y.get(i, last).iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Residuals { forward, backward, terminal: terminal / n as f64 }
}
