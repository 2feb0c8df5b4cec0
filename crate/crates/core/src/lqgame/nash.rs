//! Nash strategies from the aggregated solve, costs and deviation checks.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_aggregated, GameSpec};
use crate::backward::{solve_backward, solve_backward_mf};
use crate::error::{Error, Result};
use crate::fixpoint::{solve, MfSolution, SchemeParams};
use crate::measure::EmpiricalMeasure;
use crate::paths::{joint_marginal, PathEnsemble, TimeGrid};
use crate::problem::{Coefficients, MfProblem, State};
use crate::timepath::{gemv_add, gemv_t_add, TimePath};

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone)]
pub struct NashResult {
    pub grid: TimeGrid,
    /// `u_i = -N_i⁻¹ C_iᵀ p_i`, one ensemble per player.
    pub controls: Vec<PathEnsemble>,
    pub x: PathEnsemble,
    pub p: Vec<PathEnsemble>,
    pub q: Vec<PathEnsemble>,
    pub costs: Vec<CostEstimate>,
    /// The solved `(X, Σ K_i p_i, Σ K_i q_i)` system.
    pub aggregated: MfSolution,
    /// `max_k Ê|Σ K_i p_i - Ỹ|²`
    pub aggregation_residual_y: f64,
    /// `max_k Ê|Σ K_i q_i - Z̃|²`
    pub aggregation_residual_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashSummary {
    pub converged: bool,
    pub outer_iterations: usize,
    pub costs: Vec<CostEstimate>,
    pub aggregation_residual_y: f64,
    pub aggregation_residual_z: f64,
    /// `Ê[p_i(0)]` per player.
    pub p0: Vec<Vec<f64>>,
    /// `Ê[X_T]`.
    pub terminal_mean: Vec<f64>,
}

impl NashResult {
    pub fn converged(&self) -> bool {
        self.aggregated.converged()
    }

    pub fn summary(&self) -> NashSummary {
        NashSummary {
            converged: self.converged(),
            outer_iterations: self.aggregated.diagnostics.history.len(),
            costs: self.costs.clone(),
            aggregation_residual_y: self.aggregation_residual_y,
            aggregation_residual_z: self.aggregation_residual_z,
            p0: self.p.iter().map(|p| p.mean_at(0)).collect(),
            terminal_mean: self.x.mean_at(self.x.nodes() - 1),
        }
    }

    /// Copy with `shift` added to every value of player `i`'s control; a
    /// hook for checking that the deviation test notices a wrong equilibrium.
    pub fn with_shifted_control(&self, i: usize, shift: f64) -> Self {
        let mut out = self.clone();
        let u = &mut out.controls[i];
        for k in 0..u.nodes() {
            u.slice_mut(k).iter_mut().for_each(|v| *v += shift);
        }
        out
    }
}

/// Adjoint of player `i` along given state paths; only the driver and
/// terminal condition are used.
struct Adjoint {
    a: TimePath,
    d: TimePath,
    sigma: TimePath,
    m: TimePath,
    gamma: TimePath,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl Coefficients for Adjoint {
    fn drift(&self, _t: f64, _u: State<'_>, _law: &EmpiricalMeasure, _out: &mut [f64]) {}

    fn diffusion(&self, _t: f64, _u: State<'_>, _law: Option<&EmpiricalMeasure>, _out: &mut [f64]) {}

    fn driver(&self, t: f64, u: State<'_>, law: &EmpiricalMeasure, out: &mut [f64]) {
        let n = u.x.len();
        let mean = law.mean();
        gemv_t_add(&self.a.at(t), u.y, out);
        gemv_add(&self.m.at(t), u.x, out);
        gemv_t_add(&self.d.at(t), &mean[n..2 * n], out);
        gemv_add(&self.gamma.at(t), &mean[..n], out);
        gemv_t_add(&self.sigma.at(t), u.z, out);
        for o in out.iter_mut() {
            *o = -*o;
        }
    }

    fn terminal(&self, x: &[f64], law: &EmpiricalMeasure, out: &mut [f64]) {
        gemv_add(&self.q, x, out);
        gemv_add(&self.r, law.mean(), out);
    }
}

/// Solves the aggregated system, then each player's adjoint along the
/// solved state by regression. The `E[p_i]` term is resolved within each
/// time step when `D ≠ 0`.
///
/// The aggregated problem is built even when the structural conditions fail;
/// check them separately with [`super::check_h2`].
pub fn solve_nash(gs: &GameSpec, grid: &TimeGrid, params: &SchemeParams, seed: u64) -> Result<NashResult> {
    let agg = build_aggregated(gs, true)?;
    let sol = solve(&agg, grid, params, seed)?;
    let n = gs.state_dim();
    let particles = params.particles;
    let nodes = grid.nodes();
    let ks = gs.k_matrices()?;

    let mut ps = Vec::with_capacity(gs.player_count());
    let mut qs = Vec::with_capacity(gs.player_count());
    let mut controls = Vec::with_capacity(gs.player_count());
    for pl in &gs.players {
        let coeffs = Adjoint {
            a: gs.a.clone(),
            d: gs.d.clone(),
            sigma: gs.sigma.clone(),
            m: pl.m.clone(),
            gamma: pl.gamma.clone(),
            q: pl.q.clone(),
            r: pl.r.clone(),
        };
        let prob = MfProblem::new(1, gs.x0.clone(), gs.horizon, Arc::new(coeffs))?;
        let back = if gs.d.is_zero() {
            let flow = (0..nodes).map(|k| joint_marginal(&sol.x, &sol.x, k)).collect::<Result<Vec<_>>>()?;
            solve_backward(&prob, grid, &sol.bundle, &sol.x, &flow, &sol.terminal_law, &params.basis, params.picard_inner)?
        } else {
            solve_backward_mf(&prob, grid, &sol.bundle, &sol.x, &sol.terminal_law, &params.basis, params.picard_inner)?
        };
        let gain = pl.gain()?;
        let mi = pl.control_dim();
        let mut u = PathEnsemble::zeros(particles, nodes, mi);
        for k in 0..nodes {
            let ys = back.y.slice(k);
            u.slice_mut(k).par_chunks_mut(mi).enumerate().for_each(|(j, o)| {
                let v = &gain * DVector::from_column_slice(&ys[j * n..(j + 1) * n]);
                for (a, b) in o.iter_mut().zip(v.iter()) {
                    *a = -b;
                }
            });
        }
        ps.push(back.y);
        qs.push(back.z);
        controls.push(u);
    }

    let (mut ry, mut rz) = (0.0f64, 0.0f64);
    for k in 0..nodes {
        let (mut sy, mut sz) = (0.0, 0.0);
        for j in 0..particles {
            let mut ay = DVector::<f64>::zeros(n);
            let mut az = DVector::<f64>::zeros(n);
            for (i, kk) in ks.iter().enumerate() {
                ay += kk * DVector::from_column_slice(ps[i].get(j, k));
                az += kk * DVector::from_column_slice(qs[i].get(j, k));
            }
            sy += (ay - DVector::from_column_slice(sol.y.get(j, k))).norm_squared();
            sz += (az - DVector::from_column_slice(sol.z.get(j, k))).norm_squared();
        }
        ry = ry.max(sy / particles as f64);
        rz = rz.max(sz / particles as f64);
    }

    let costs = (0..gs.player_count()).map(|i| cost(gs, i, &sol.x, &controls)).collect::<Result<Vec<_>>>()?;
    Ok(NashResult {
        grid: *grid,
        controls,
        x: sol.x.clone(),
        p: ps,
        q: qs,
        costs,
        aggregated: sol,
        aggregation_residual_y: ry,
        aggregation_residual_z: rz,
    })
}

/// Per-particle linearised contributions to `J_i`; their mean is the plug-in
/// estimate and their spread gives the delta-method standard error.
fn cost_influence(gs: &GameSpec, i: usize, x: &PathEnsemble, u: &PathEnsemble) -> Result<(f64, Vec<f64>)> {
    let pl = gs.players.get(i).ok_or(Error::IndexOutOfRange { index: i, len: gs.player_count() })?;
    let n = gs.state_dim();
    let (particles, nodes) = (x.particles(), x.nodes());
    if x.dim() != n {
        return Err(Error::ShapeMismatch(format!("state ensemble has dimension {}, game has {n}", x.dim())));
    }
    if u.particles() != particles || u.nodes() != nodes || u.dim() != pl.control_dim() {
        return Err(Error::ShapeMismatch(format!("control ensemble of player {i} does not match the state ensemble")));
    }
    let steps = nodes - 1;
    let dt = if steps > 0 { gs.horizon / steps as f64 } else { 0.0 };
    let sym = |m: &DMatrix<f64>| (m + m.transpose()) * 0.5;
    let quad = |m: &DMatrix<f64>, v: &[f64]| {
        let v = DVector::from_column_slice(v);
        v.dot(&(m * &v))
    };

    let mut value = 0.0;
    let mut infl = vec![0.0; particles];
    let mut add_node = |k: usize, w: f64, running: bool| {
        let mean = x.mean_at(k);
        let (quad_m, mean_m) = if running {
            let t = gs.horizon * k as f64 / steps.max(1) as f64;
            (sym(&pl.m.at(t)), sym(&pl.gamma.at(t)))
        } else {
            (sym(&pl.q), sym(&pl.r))
        };
        let grad = &mean_m * DVector::from_column_slice(&mean) * 2.0;
        let mq = quad(&mean_m, &mean);
        let xs = x.slice(k);
        let us = u.slice(k);
        let mi = pl.control_dim();
        let contrib: Vec<(f64, f64)> = (0..particles)
            .into_par_iter()
            .map(|j| {
                let xj = &xs[j * n..(j + 1) * n];
                let mut c = quad(&quad_m, xj);
                if running {
                    c += quad(&pl.n, &us[j * mi..(j + 1) * mi]);
                }
                // linearisation of mᵀ R m around the sample mean
                let lin: f64 = grad.iter().zip(xj).zip(&mean).map(|((g, a), b)| g * (a - b)).sum();
                (c, lin)
            })
            .collect();
        let mut sum = 0.0;
        for (a, (c, lin)) in infl.iter_mut().zip(&contrib) {
            *a += 0.5 * w * (c + mq + lin);
            sum += c;
        }
        value += 0.5 * w * (sum / particles as f64 + mq);
    };
    add_node(steps, 1.0, false);
    if steps > 0 {
        for k in 0..=steps {
            let w = if k == 0 || k == steps { 0.5 * dt } else { dt };
            add_node(k, w, true);
        }
    }
    Ok((value, infl))
}

fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte Carlo estimate of
///
/// ```text
/// J_i = ½ { E[X_Tᵀ Q_i X_T] + E[X_T]ᵀ R_i E[X_T]
///           + ∫ E[Xᵀ M_i X + u_iᵀ N_i u_i] + E[X]ᵀ Γ_i E[X] dt }
/// ```
///
/// with trapezoidal quadrature on the ensemble's nodes, plug-in means and a
/// delta-method standard error.
pub fn cost(gs: &GameSpec, i: usize, x: &PathEnsemble, controls: &[PathEnsemble]) -> Result<CostEstimate> {
    let u = controls.get(i).ok_or(Error::IndexOutOfRange { index: i, len: controls.len() })?;
    let (value, infl) = cost_influence(gs, i, x, u)?;
    let (_, stderr) = mean_and_stderr(&infl);
    Ok(CostEstimate { value, stderr })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationKind {
    /// `φ ≡ c`
    Constant,
    /// `φ_t = c + L X_t`
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationOutcome {
    pub kind: DeviationKind,
    /// `J_i(deviated) - J_i(u*)`
    pub delta: f64,
    /// `sqrt(se(J_i(deviated))² + se(J_i(u*))²)`
    pub stderr: f64,
    /// Standard error of the paired per-particle differences; much smaller
    /// than `stderr` since both costs share the noise, but blind to the
    /// discretization bias of the computed equilibrium.
    pub paired_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub player: usize,
    pub magnitude: f64,
    pub baseline: CostEstimate,
    pub outcomes: Vec<DeviationOutcome>,
    pub min_delta: f64,
    /// Passes when every `delta ≥ -3 stderr`.
    pub pass: bool,
}

enum Phi {
    Constant(DVector<f64>),
    Affine(DVector<f64>, DMatrix<f64>),
}

/// Re-simulates the state under fixed `u_{-i}` and `u_i + magnitude · φ(X)`
/// on the solution's Brownian increments, the mean term using the deviated
/// ensemble's own mean.
fn simulate(gs: &GameSpec, nash: &NashResult, i: usize, magnitude: f64, phi: &Phi) -> Result<(PathEnsemble, PathEnsemble)> {
    let grid = &nash.grid;
    let bundle = &nash.aggregated.bundle;
    let n = gs.state_dim();
    let (particles, nodes) = (nash.x.particles(), nash.x.nodes());
    let mi = gs.players[i].control_dim();
    let dt = grid.dt();
    let mut x = PathEnsemble::zeros(particles, nodes, n);
    let mut ui = nash.controls[i].clone();
    for j in 0..particles {
        x.get_mut(j, 0).copy_from_slice(&gs.x0);
    }
    for k in 0..nodes {
        let xs = x.slice(k).to_vec();
        let add = |o: &mut [f64], j: usize| {
            let xj = DVector::from_column_slice(&xs[j * n..(j + 1) * n]);
            let v = match phi {
                Phi::Constant(c) => c.clone(),
                Phi::Affine(c, l) => c + l * xj,
            };
            for (a, b) in o.iter_mut().zip(v.iter()) {
                *a += magnitude * b;
            }
        };
        ui.slice_mut(k).chunks_mut(mi).enumerate().for_each(|(j, o)| add(o, j));
        if k == grid.steps() {
            break;
        }
        let t = grid.time(k);
        let (a, d, beta, sigma, alpha) = (gs.a.at(t), gs.d.at(t), gs.beta.at(t), gs.sigma.at(t), gs.alpha.at(t));
        let mean = x.mean_at(k);
        let mut base = vec![0.0; n];
        gemv_add(&d, &mean, &mut base);
        for (b, v) in base.iter_mut().zip(beta.iter()) {
            *b += v;
        }
        let us: Vec<&[f64]> = (0..gs.player_count()).map(|p| if p == i { ui.slice(k) } else { nash.controls[p].slice(k) }).collect();
        let (_, next) = x.split_step(k);
        next.par_chunks_mut(n).enumerate().for_each(|(j, out)| {
            let xj = &xs[j * n..(j + 1) * n];
            let mut f = base.clone();
            gemv_add(&a, xj, &mut f);
            for (p, pl) in gs.players.iter().enumerate() {
                let mp = pl.control_dim();
                gemv_add(&pl.c, &us[p][j * mp..(j + 1) * mp], &mut f);
            }
            let mut s = alpha.iter().cloned().collect::<Vec<_>>();
            gemv_add(&sigma, xj, &mut s);
            let dw = bundle.increment(j, k)[0];
            for r in 0..n {
                out[r] = xj[r] + f[r] * dt + s[r] * dw;
            }
        });
    }
    if !x.is_finite() {
        return Err(Error::NumericalBreakdown { stage: "deviation", step: 0 });
    }
    Ok((x, ui))
}

/// Compares `J_i` at the computed equilibrium with `perturbations` random
/// unilateral deviations of player `i` (alternately constant and affine in
/// the state), all driven by the same noise.
pub fn deviation_test(
    gs: &GameSpec,
    nash: &NashResult,
    i: usize,
    perturbations: usize,
    magnitude: f64,
    seed: u64,
) -> Result<DeviationReport> {
    if i >= gs.player_count() {
        return Err(Error::IndexOutOfRange { index: i, len: gs.player_count() });
    }
    let n = gs.state_dim();
    let mi = gs.players[i].control_dim();
    let zero = Phi::Constant(DVector::zeros(mi));
    let baseline_paths = simulate(gs, nash, i, 0.0, &zero)?;
    let controls_with = |ui: PathEnsemble| {
        let mut c = nash.controls.clone();
        c[i] = ui;
        c
    };
    let (base_value, base_infl) = cost_influence(gs, i, &baseline_paths.0, &baseline_paths.1)?;
    let (_, base_se) = mean_and_stderr(&base_infl);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::with_capacity(perturbations);
    for j in 0..perturbations {
        let c = DVector::from_fn(mi, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (kind, phi) = if j % 2 == 0 {
            (DeviationKind::Constant, Phi::Constant(c))
        } else {
            let scale = 1.0 / (n as f64).sqrt();
            let l = DMatrix::from_fn(mi, n, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
            (DeviationKind::Affine, Phi::Affine(c, l))
        };
        let (x, ui) = simulate(gs, nash, i, magnitude, &phi)?;
        let controls = controls_with(ui);
        let (value, infl) = cost_influence(gs, i, &x, &controls[i])?;
        let diffs: Vec<f64> = infl.iter().zip(&base_infl).map(|(a, b)| a - b).collect();
        let (_, paired_stderr) = mean_and_stderr(&diffs);
        let (_, se) = mean_and_stderr(&infl);
        let stderr = se.hypot(base_se);
        outcomes.push(DeviationOutcome { kind, delta: value - base_value, stderr, paired_stderr });
    }
    let min_delta = outcomes.iter().map(|o| o.delta).fold(f64::INFINITY, f64::min);
    let pass = outcomes.iter().all(|o| o.delta >= -3.0 * o.stderr);
    Ok(DeviationReport {
        player: i,
        magnitude,
        baseline: CostEstimate { value: base_value, stderr: base_se },
        outcomes,
        min_delta: if perturbations == 0 { 0.0 } else { min_delta },
        pass,
    })
}

/// Player `i`'s Hamiltonian
///
/// ```text
/// H_i = p_iᵀ (A x + Σ C_k u_k + D ζ + β)
///       + ½ (xᵀ M_i x + u_iᵀ N_i u_i + ζᵀ Γ_i ζ) + (σ x + α)ᵀ q_i
/// ```
///
/// with `ζ` standing for `E[X]`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    gs: &GameSpec,
    i: usize,
    t: f64,
    x: &[f64],
    u_all: &[Vec<f64>],
    zeta: &[f64],
    p_i: &[f64],
    q_i: &[f64],
) -> Result<f64> {
    let n = gs.state_dim();
    let pl = gs.players.get(i).ok_or(Error::IndexOutOfRange { index: i, len: gs.player_count() })?;
    for v in [x, zeta, p_i, q_i] {
        if v.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: v.len() });
        }
    }
    if u_all.len() != gs.player_count() {
        return Err(Error::DimensionMismatch { expected: gs.player_count(), got: u_all.len() });
    }
    for (u, p) in u_all.iter().zip(&gs.players) {
        if u.len() != p.control_dim() {
            return Err(Error::DimensionMismatch { expected: p.control_dim(), got: u.len() });
        }
    }
    let mut f = gs.beta.at(t).iter().cloned().collect::<Vec<_>>();
    gemv_add(&gs.a.at(t), x, &mut f);
    gemv_add(&gs.d.at(t), zeta, &mut f);
    for (u, p) in u_all.iter().zip(&gs.players) {
        gemv_add(&p.c, u, &mut f);
    }
    let mut s = gs.alpha.at(t).iter().cloned().collect::<Vec<_>>();
    gemv_add(&gs.sigma.at(t), x, &mut s);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let quad = |m: &DMatrix<f64>, v: &[f64]| {
        let mut o = vec![0.0; v.len()];
        gemv_add(m, v, &mut o);
        dot(v, &o)
    };
    let running = quad(&pl.m.at(t), x) + quad(&pl.n, &u_all[i]) + quad(&pl.gamma.at(t), zeta);
    Ok(dot(p_i, &f) + 0.5 * running + dot(&s, q_i))
}

/// RK4 for `P' = -2aP + P² - M`, `P(T) = Q`, returning `P(0)`: the scalar
/// single-player feedback `p = P x`.
#[cfg(test)]
pub(crate) fn riccati_scalar(a: f64, m: f64, q: f64, horizon: f64, steps: usize) -> f64 {
    let rhs = |p: f64| -(-2.0 * a * p + p * p - m);
    let h = horizon / steps as f64;
    let mut p = q;
    for _ in 0..steps {
        let k1 = rhs(p);
        let k2 = rhs(p + 0.5 * h * k1);
        let k3 = rhs(p + 0.5 * h * k2);
        let k4 = rhs(p + h * k3);
        p += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    p
}
