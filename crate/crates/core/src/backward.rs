//! Least-squares Monte Carlo for the backward pair `(Y, Z)`.

use std::borrow::Cow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{check_ensemble, check_inputs, euler_step, Perturbation, Scratch};
use crate::measure::EmpiricalMeasure;
use crate::paths::{BrownianBundle, PathEnsemble, TimeGrid};
use crate::problem::{MfProblem, State};
use crate::regression::{fit, Fit, RegressionBasis};

/// Regression estimates `Y_k ≈ φ_k(X_k)`, `Z_k ≈ ψ_k(X_k)` for `k < N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecouplingField {
    pub y: Vec<Fit>,
    pub z: Vec<Fit>,
}

impl DecouplingField {
    /// `Y ≡ y`, `Z ≡ 0` on every step.
    pub fn constant(steps: usize, y: &[f64], z_len: usize) -> Self {
        Self { y: vec![Fit::constant(y); steps], z: vec![Fit::constant(&vec![0.0; z_len]); steps] }
    }

    pub fn steps(&self) -> usize {
        self.y.len()
    }
}

/// Per-step regression diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub y_residual: f64,
    pub z_residual: f64,
    pub ridge: bool,
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub y: PathEnsemble,
    pub z: PathEnsemble,
    pub field: DecouplingField,
    pub steps: Vec<StepReport>,
}

impl BackwardOutput {
    pub fn max_residual(&self) -> f64 {
        self.steps.iter().map(|s| s.y_residual.max(s.z_residual)).fold(0.0, f64::max)
    }

    pub fn ridge_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.ridge).count()
    }
}

fn eval_fit(f: &Fit, xs: &[f64], m: usize, out: &mut [f64], width: usize) {
    out.par_chunks_mut(width).enumerate().for_each(|(i, o)| f.eval(&xs[i * m..(i + 1) * m], o));
}

fn check_finite(v: &[f64], step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalBreakdown { stage: "backward", step })
    }
}

fn terminal_values(p: &MfProblem, xs: &[f64], law: &EmpiricalMeasure, out: &mut [f64]) {
    let m = p.state_dim;
    out.par_chunks_mut(m).enumerate().for_each(|(i, o)| {
        o.fill(0.0);
        p.coefficients.terminal(&xs[i * m..(i + 1) * m], law, o);
    });
}

/// Regression for `Z_k` with target `(Ỹ - E[Ỹ | X_k]) ΔWᵀ / Δt`, row-major
/// `m x d` per particle. Subtracting the conditional mean removes a term with
/// zero conditional expectation and makes `Z` vanish exactly when `Ỹ` is
/// `X_k`-measurable.
fn fit_z(basis: &RegressionBasis, xs: &[f64], next_y: &[f64], bundle: &BrownianBundle, k: usize, m: usize, dt: f64) -> Result<Fit> {
    let d = bundle.dim();
    let mean_fit = fit(basis, m, xs, next_y, m)?;
    let mut t = vec![0.0; next_y.len() * d];
    t.par_chunks_mut(m * d).enumerate().for_each_init(
        || vec![0.0; m],
        |cond, (i, o)| {
            mean_fit.eval(&xs[i * m..(i + 1) * m], cond);
            let dw = bundle.increment(i, k);
            for a in 0..m {
                let centred = next_y[i * m + a] - cond[a];
                for b in 0..d {
                    o[a * d + b] = centred * dw[b] / dt;
                }
            }
        },
    );
    fit(basis, m, xs, &t, m * d)
}

/// `Ỹ - h(t_k, X_k, Y_k, Z_k, ν_k) Δt - Z_k ΔW_k` per particle. The last
/// term has zero conditional mean; keeping it removes the martingale noise
/// from the regression and makes the in-sample increments
/// `Y_{k+1} - Y_k - hΔt - Z_kΔW_k` average to zero.
#[allow(clippy::too_many_arguments)]
fn y_targets(
    p: &MfProblem,
    t: f64,
    dt: f64,
    next_y: &[f64],
    xs: &[f64],
    ys: &[f64],
    zs: &[f64],
    law: &EmpiricalMeasure,
    bundle: &BrownianBundle,
    k: usize,
) -> Vec<f64> {
    let (m, zl, d) = (p.state_dim, p.z_len(), p.noise_dim);
    let mut out = vec![0.0; next_y.len()];
    out.par_chunks_mut(m).enumerate().for_each_init(
        || vec![0.0; m],
        |h, (i, o)| {
            h.fill(0.0);
            let z = &zs[i * zl..(i + 1) * zl];
            let u = State { x: &xs[i * m..(i + 1) * m], y: &ys[i * m..(i + 1) * m], z };
            p.coefficients.driver(t, u, law, h);
            let dw = bundle.increment(i, k);
            for a in 0..m {
                let zdw: f64 = (0..d).map(|b| z[a * d + b] * dw[b]).sum();
                o[a] = next_y[i * m + a] - h[a] * dt - zdw;
            }
        },
    );
    out
}

fn validate(
    p: &MfProblem,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    x_ens: &PathEnsemble,
    terminal_law: &EmpiricalMeasure,
    picard_inner: usize,
) -> Result<()> {
    if bundle.steps() != grid.steps() {
        return Err(Error::ShapeMismatch(format!("bundle has {} steps, grid {}", bundle.steps(), grid.steps())));
    }
    if bundle.dim() != p.noise_dim {
        return Err(Error::DimensionMismatch { expected: p.noise_dim, got: bundle.dim() });
    }
    check_ensemble(x_ens, bundle.particles(), grid.nodes(), p.state_dim, "X")?;
    if terminal_law.dim() != p.state_dim {
        return Err(Error::DimensionMismatch { expected: p.state_dim, got: terminal_law.dim() });
    }
    if picard_inner == 0 {
        return Err(Error::InvalidParameter("picard_inner must be at least 1".into()));
    }
    if !x_ens.is_finite() {
        return Err(Error::NonFinite("forward paths".into()));
    }
    Ok(())
}

/// Regression-based backward recursion along fixed forward paths:
///
/// ```text
/// Y_N = g(X_N, μ_T)
/// Z_k = E[(Y_{k+1} - E[Y_{k+1} | X_k]) ΔW_kᵀ / Δt | X_k]
/// Y_k = E[Y_{k+1} - h(t_k, X_k, Y_k, Z_k, ν_k) Δt - Z_k ΔW_k | X_k]
/// ```
///
/// with the implicit `Y_k` resolved by `picard_inner` sub-iterations started
/// from `Y_{k+1}`. `Z` at the last node repeats the last step.
#[allow(clippy::too_many_arguments)]
pub fn solve_backward(
    p: &MfProblem,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    x_ens: &PathEnsemble,
    frozen_flow: &[EmpiricalMeasure],
    terminal_law: &EmpiricalMeasure,
    basis: &RegressionBasis,
    picard_inner: usize,
) -> Result<BackwardOutput> {
    validate(p, grid, bundle, x_ens, terminal_law, picard_inner)?;
    check_inputs(p, grid, bundle, frozen_flow)?;
    recursion(p, grid, bundle, x_ens, terminal_law, basis, picard_inner, |k, _| Ok(Cow::Borrowed(&frozen_flow[k])))
}

/// As [`solve_backward`], but `ν_k` is the joint law of `(X_k, Y_k)` under
/// the current estimate of `Y_k`, refreshed in every sub-iteration: the
/// mean-field BSDE along given forward paths.
#[allow(clippy::too_many_arguments)]
pub fn solve_backward_mf(
    p: &MfProblem,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    x_ens: &PathEnsemble,
    terminal_law: &EmpiricalMeasure,
    basis: &RegressionBasis,
    picard_inner: usize,
) -> Result<BackwardOutput> {
    validate(p, grid, bundle, x_ens, terminal_law, picard_inner)?;
    let m = p.state_dim;
    recursion(p, grid, bundle, x_ens, terminal_law, basis, picard_inner, |k, ys| {
        let xs = x_ens.slice(k);
        let mut data = Vec::with_capacity(xs.len() * 2);
        for (x, y) in xs.chunks_exact(m).zip(ys.chunks_exact(m)) {
            data.extend_from_slice(x);
            data.extend_from_slice(y);
        }
        Ok(Cow::Owned(EmpiricalMeasure::from_flat(2 * m, data)?))
    })
}

#[allow(clippy::too_many_arguments)]
fn recursion<'a>(
    p: &MfProblem,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    x_ens: &PathEnsemble,
    terminal_law: &EmpiricalMeasure,
    basis: &RegressionBasis,
    picard_inner: usize,
    law_at: impl Fn(usize, &[f64]) -> Result<Cow<'a, EmpiricalMeasure>>,
) -> Result<BackwardOutput> {
    let (n, nodes, m, zl) = (bundle.particles(), grid.nodes(), p.state_dim, p.z_len());
    let dt = grid.dt();
    let mut y = PathEnsemble::zeros(n, nodes, m);
    let mut z = PathEnsemble::zeros(n, nodes, zl);
    let last = grid.steps();
    terminal_values(p, x_ens.slice(last), terminal_law, y.slice_mut(last));
    check_finite(y.slice(last), last)?;

    let mut fy = Vec::with_capacity(last);
    let mut fz = Vec::with_capacity(last);
    let mut steps = Vec::with_capacity(last);
    for k in (0..last).rev() {
        let t = grid.time(k);
        let xs = x_ens.slice(k);
        let next = y.slice(k + 1).to_vec();
        let zfit = fit_z(basis, xs, &next, bundle, k, m, dt)?;
        eval_fit(&zfit, xs, m, z.slice_mut(k), zl);
        y.slice_mut(k).copy_from_slice(&next);
        let mut yfit = None;
        for _ in 0..picard_inner {
            let law = law_at(k, y.slice(k))?;
            let targets = y_targets(p, t, dt, &next, xs, y.slice(k), z.slice(k), &law, bundle, k);
            let f = fit(basis, m, xs, &targets, m)?;
            eval_fit(&f, xs, m, y.slice_mut(k), m);
            yfit = Some(f);
        }
        let yfit = yfit.expect("picard_inner >= 1");
        check_finite(y.slice(k), k)?;
        check_finite(z.slice(k), k)?;
        steps.push(StepReport { step: k, y_residual: yfit.residual, z_residual: zfit.residual, ridge: yfit.ridge || zfit.ridge });
        fy.push(yfit);
        fz.push(zfit);
    }
    fy.reverse();
    fz.reverse();
    steps.reverse();
    if last > 0 {
        let zlast = z.slice(last - 1).to_vec();
        z.slice_mut(last).copy_from_slice(&zlast);
    }
    Ok(BackwardOutput { y, z, field: DecouplingField { y: fy, z: fz }, steps })
}

/// Backward recursion for the fully coupled inner problem of one outer step.
///
/// At each step the forward transition is re-simulated from `X_k` with the
/// current `(Y_k, Z_k)` (including the `δ` terms), `Ỹ_{k+1}` is read from the
/// field already built at `k + 1` (or `g` at the horizon), and `(Y_k, Z_k)`
/// are regressed on `X_k`; `picard_inner` rounds resolve the local coupling.
/// `y_guess`, `z_guess` seed the rounds.
#[allow(clippy::too_many_arguments)]
pub fn solve_backward_coupled(
    p: &MfProblem,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    x_ens: &PathEnsemble,
    y_guess: &PathEnsemble,
    z_guess: &PathEnsemble,
    frozen_flow: &[EmpiricalMeasure],
    terminal_law: &EmpiricalMeasure,
    basis: &RegressionBasis,
    picard_inner: usize,
    perturbation: Option<Perturbation<'_>>,
) -> Result<BackwardOutput> {
    validate(p, grid, bundle, x_ens, terminal_law, picard_inner)?;
    check_inputs(p, grid, bundle, frozen_flow)?;
    let (n, nodes, m, zl) = (bundle.particles(), grid.nodes(), p.state_dim, p.z_len());
    check_ensemble(y_guess, n, nodes, m, "Y guess")?;
    check_ensemble(z_guess, n, nodes, zl, "Z guess")?;
    if let Some(pt) = &perturbation {
        check_ensemble(pt.y_prev, n, nodes, m, "previous Y")?;
        check_ensemble(pt.z_prev, n, nodes, zl, "previous Z")?;
    }
    let dt = grid.dt();
    let last = grid.steps();
    let mut y = y_guess.clone();
    let mut z = z_guess.clone();
    terminal_values(p, x_ens.slice(last), terminal_law, y.slice_mut(last));
    check_finite(y.slice(last), last)?;

    let mut fy: Vec<Fit> = Vec::with_capacity(last);
    let mut fz: Vec<Fit> = Vec::with_capacity(last);
    let mut steps = Vec::with_capacity(last);
    let mut next_y = vec![0.0; n * m];
    for k in (0..last).rev() {
        let t = grid.time(k);
        let xs = x_ens.slice(k);
        let law = &frozen_flow[k];
        let mut report = None;
        for _ in 0..picard_inner {
            // local re-simulation X_k -> X̃_{k+1} -> Ỹ_{k+1}
            {
                let (ys, zs) = (y.slice(k), z.slice(k));
                let next_field = fy.last();
                next_y.par_chunks_mut(m).enumerate().for_each_init(
                    || (Scratch::new(m, zl), vec![0.0; m]),
                    |(scratch, xt), (i, out)| {
                        let u = State { x: &xs[i * m..(i + 1) * m], y: &ys[i * m..(i + 1) * m], z: &zs[i * zl..(i + 1) * zl] };
                        let prev = perturbation.map(|pt| {
                            (pt.delta, &pt.y_prev.slice(k)[i * m..(i + 1) * m], &pt.z_prev.slice(k)[i * zl..(i + 1) * zl])
                        });
                        euler_step(p, t, dt, u, prev, bundle.increment(i, k), law, scratch, xt);
                        match next_field {
                            Some(f) => f.eval(xt, out),
                            None => {
                                out.fill(0.0);
                                p.coefficients.terminal(xt, terminal_law, out);
                            }
                        }
                    },
                );
            }
            check_finite(&next_y, k)?;
            let zfit = fit_z(basis, xs, &next_y, bundle, k, m, dt)?;
            eval_fit(&zfit, xs, m, z.slice_mut(k), zl);
            let targets = y_targets(p, t, dt, &next_y, xs, y.slice(k), z.slice(k), law, bundle, k);
            let yfit = fit(basis, m, xs, &targets, m)?;
            eval_fit(&yfit, xs, m, y.slice_mut(k), m);
            check_finite(y.slice(k), k)?;
            check_finite(z.slice(k), k)?;
            report = Some((yfit, zfit));
        }
        let (yfit, zfit) = report.expect("picard_inner >= 1");
        steps.push(StepReport { step: k, y_residual: yfit.residual, z_residual: zfit.residual, ridge: yfit.ridge || zfit.ridge });
        fy.push(yfit);
        fz.push(zfit);
    }
    fy.reverse();
    fz.reverse();
    steps.reverse();
    if last > 0 {
        let zlast = z.slice(last - 1).to_vec();
        z.slice_mut(last).copy_from_slice(&zlast);
    }
    Ok(BackwardOutput { y, z, field: DecouplingField { y: fy, z: fz }, steps })
}
