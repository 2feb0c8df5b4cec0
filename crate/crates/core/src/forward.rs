//! Euler–Maruyama propagation of the forward component under a frozen flow.

use rayon::prelude::*;

use crate::backward::DecouplingField;
use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::paths::{BrownianBundle, PathEnsemble, TimeGrid};
use crate::problem::{MfProblem, State};

/// Previous outer iterate entering the `-δ(Y - Y^n)`, `-δ(Z - Z^n)` terms.
#[derive(Debug, Clone, Copy)]
pub struct Perturbation<'a> {
    pub delta: f64,
    pub y_prev: &'a PathEnsemble,
    pub z_prev: &'a PathEnsemble,
}

pub(crate) fn check_inputs(p: &MfProblem, grid: &TimeGrid, bundle: &BrownianBundle, flow: &[EmpiricalMeasure]) -> Result<()> {
    if bundle.steps() != grid.steps() {
        return Err(Error::ShapeMismatch(format!("bundle has {} steps, grid {}", bundle.steps(), grid.steps())));
    }
    if bundle.dim() != p.noise_dim {
        return Err(Error::DimensionMismatch { expected: p.noise_dim, got: bundle.dim() });
    }
    if flow.len() != grid.nodes() {
        return Err(Error::ShapeMismatch(format!("flow has {} clouds for {} nodes", flow.len(), grid.nodes())));
    }
    if let Some(bad) = flow.iter().find(|c| c.dim() != 2 * p.state_dim) {
        return Err(Error::DimensionMismatch { expected: 2 * p.state_dim, got: bad.dim() });
    }
    Ok(())
}

pub(crate) fn check_ensemble(e: &PathEnsemble, particles: usize, nodes: usize, dim: usize, what: &str) -> Result<()> {
    if e.particles() != particles || e.nodes() != nodes || e.dim() != dim {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected {particles}x{nodes}x{dim}, got {}x{}x{}",
            e.particles(),
            e.nodes(),
            e.dim()
        )));
    }
    Ok(())
}

pub(crate) struct Scratch {
    pub drift: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Scratch {
    pub fn new(m: usize, zl: usize) -> Self {
        Self { drift: vec![0.0; m], sigma: vec![0.0; zl] }
    }
}

/// One Euler step from `(t, x, y, z)` with increment `dw`, writing into
/// `next`. `prev` carries `(δ, Y^n, Z^n)` at the current node.
#[allow(clippy::too_many_arguments)]
pub(crate) fn euler_step(
    p: &MfProblem,
    t: f64,
    dt: f64,
    u: State<'_>,
    prev: Option<(f64, &[f64], &[f64])>,
    dw: &[f64],
    law: &EmpiricalMeasure,
    scratch: &mut Scratch,
    next: &mut [f64],
) {
    let d = p.noise_dim;
    scratch.drift.fill(0.0);
    scratch.sigma.fill(0.0);
    p.coefficients.drift(t, u, law, &mut scratch.drift);
    p.coefficients.diffusion(t, u, p.diffusion_law(law), &mut scratch.sigma);
    if let Some((delta, yp, zp)) = prev {
        if delta != 0.0 {
            for (f, (y, y0)) in scratch.drift.iter_mut().zip(u.y.iter().zip(yp)) {
                *f -= delta * (y - y0);
            }
            if !p.law_free_sigma {
                for (s, (z, z0)) in scratch.sigma.iter_mut().zip(u.z.iter().zip(zp)) {
                    *s -= delta * (z - z0);
                }
            }
        }
    }
    for (i, out) in next.iter_mut().enumerate() {
        let noise: f64 = (0..d).map(|j| scratch.sigma[i * d + j] * dw[j]).sum();
        *out = u.x[i] + scratch.drift[i] * dt + noise;
    }
}

fn check_step(next: &[f64], step: usize) -> Result<()> {
    if next.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalBreakdown { stage: "forward", step })
    }
}

/// Forward sweep with given `Y`, `Z` paths:
/// `X_{k+1} = X_k + [f - δ(Y_k - Y^prev_k)]Δt + [σ - δ(Z_k - Z^prev_k)]ΔW_k`,
/// the `δZ` term being dropped for law-free diffusions.
#[allow(clippy::too_many_arguments)]
pub fn propagate(
    p: &MfProblem,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    y_ens: &PathEnsemble,
    z_ens: &PathEnsemble,
    y_prev: &PathEnsemble,
    z_prev: &PathEnsemble,
    frozen_flow: &[EmpiricalMeasure],
    delta: f64,
) -> Result<PathEnsemble> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!("delta must be nonnegative, got {delta}")));
    }
    check_inputs(p, grid, bundle, frozen_flow)?;
    let (n, nodes, m, zl) = (bundle.particles(), grid.nodes(), p.state_dim, p.z_len());
    check_ensemble(y_ens, n, nodes, m, "Y")?;
    check_ensemble(y_prev, n, nodes, m, "previous Y")?;
    check_ensemble(z_ens, n, nodes, zl, "Z")?;
    check_ensemble(z_prev, n, nodes, zl, "previous Z")?;

    let dt = grid.dt();
    let mut x = PathEnsemble::constant(n, nodes, &p.x0);
    for k in 0..grid.steps() {
        let t = grid.time(k);
        let law = &frozen_flow[k];
        let (y, z, yp, zp) = (y_ens.slice(k), z_ens.slice(k), y_prev.slice(k), z_prev.slice(k));
        let (cur, next) = x.split_step(k);
        next.par_chunks_mut(m).enumerate().for_each_init(
            || Scratch::new(m, zl),
            |scratch, (i, out)| {
                let u = State { x: &cur[i * m..(i + 1) * m], y: &y[i * m..(i + 1) * m], z: &z[i * zl..(i + 1) * zl] };
                let prev = (delta, &yp[i * m..(i + 1) * m], &zp[i * zl..(i + 1) * zl]);
                euler_step(p, t, dt, u, Some(prev), bundle.increment(i, k), law, scratch, out);
            },
        );
        check_step(next, k)?;
    }
    Ok(x)
}

/// Forward sweep in which `Y_k = φ_k(X_k)`, `Z_k = ψ_k(X_k)` are read off a
/// decoupling field and `Y_N = g(X_N, μ_T)`. Returns `(X, Y, Z)`; `Z` at the
/// last node repeats the last step.
#[allow(clippy::too_many_arguments)]
pub fn propagate_field(
    p: &MfProblem,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    field: &DecouplingField,
    frozen_flow: &[EmpiricalMeasure],
    terminal_law: &EmpiricalMeasure,
    perturbation: Option<Perturbation<'_>>,
) -> Result<(PathEnsemble, PathEnsemble, PathEnsemble)> {
    check_inputs(p, grid, bundle, frozen_flow)?;
    let (n, nodes, m, zl) = (bundle.particles(), grid.nodes(), p.state_dim, p.z_len());
    if field.steps() != grid.steps() {
        return Err(Error::ShapeMismatch(format!("field has {} steps, grid {}", field.steps(), grid.steps())));
    }
    if let Some(pert) = &perturbation {
        check_ensemble(pert.y_prev, n, nodes, m, "previous Y")?;
        check_ensemble(pert.z_prev, n, nodes, zl, "previous Z")?;
    }
    let dt = grid.dt();
    let mut x = PathEnsemble::constant(n, nodes, &p.x0);
    let mut y = PathEnsemble::zeros(n, nodes, m);
    let mut z = PathEnsemble::zeros(n, nodes, zl);
    for k in 0..grid.steps() {
        let t = grid.time(k);
        let law = &frozen_flow[k];
        let xs = x.slice(k);
        y.slice_mut(k)
            .par_chunks_mut(m)
            .zip(z.slice_mut(k).par_chunks_mut(zl))
            .enumerate()
            .for_each(|(i, (yi, zi))| {
                let xi = &xs[i * m..(i + 1) * m];
                field.y[k].eval(xi, yi);
                field.z[k].eval(xi, zi);
            });
        let (ys, zs) = (y.slice(k), z.slice(k));
        let (cur, next) = x.split_step(k);
        next.par_chunks_mut(m).enumerate().for_each_init(
            || Scratch::new(m, zl),
            |scratch, (i, out)| {
                let u = State { x: &cur[i * m..(i + 1) * m], y: &ys[i * m..(i + 1) * m], z: &zs[i * zl..(i + 1) * zl] };
                let prev = perturbation.map(|pt| {
                    (pt.delta, &pt.y_prev.slice(k)[i * m..(i + 1) * m], &pt.z_prev.slice(k)[i * zl..(i + 1) * zl])
                });
                euler_step(p, t, dt, u, prev, bundle.increment(i, k), law, scratch, out);
            },
        );
        check_step(next, k)?;
    }
    let last = grid.steps();
    let xs = x.slice(last);
    y.slice_mut(last).par_chunks_mut(m).enumerate().for_each(|(i, yi)| {
        p.coefficients.terminal(&xs[i * m..(i + 1) * m], terminal_law, yi);
    });
    if !y.slice(last).iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalBreakdown { stage: "terminal", step: last });
    }
    if last > 0 {
        let zl_prev = z.slice(last - 1).to_vec();
        z.slice_mut(last).copy_from_slice(&zl_prev);
    }
    Ok((x, y, z))
}
