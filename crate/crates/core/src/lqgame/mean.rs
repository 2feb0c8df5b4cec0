//! Deterministic reduction of a game to the means `(E[X], E[p_i])`.
//!
//! Taking expectations in the state and adjoint equations gives the
//! two-point boundary problem
//!
//! ```text
//! m'   = (A + D) m - Σ K_i p̄_i + β,            m(0)   = x0
//! p̄_i' = -(A + D)ᵀ p̄_i - (M_i + Γ_i) m,        p̄_i(T) = (Q_i + R_i) m(T)
//! ```
//!
//! which closes only when `σ = 0` (otherwise `E[σᵀ q_i]` enters). Writing
//! the solution as an affine function of `y = m(T)` and integrating backward
//! gives `m(0) = B y + c`; the game has an equilibrium mean iff `B` is
//! invertible.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::GameSpec;
use crate::error::{Error, Result};

const SUBSTEPS: usize = 2000;
const SINGULAR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSolution {
    pub times: Vec<f64>,
    /// `E[X_t]` at `times`.
    pub mean_x: Vec<Vec<f64>>,
    /// `E[p_i(t)]`, indexed `[player][time]`.
    pub mean_p: Vec<Vec<Vec<f64>>>,
    /// `-N_i⁻¹ C_iᵀ E[p_i(t)]`, indexed `[player][time]`.
    pub controls: Vec<Vec<Vec<f64>>>,
    /// `E[X_T]`.
    pub terminal_mean: Vec<f64>,
    pub boundary: Vec<Vec<f64>>,
    pub det: f64,
}

impl MeanSolution {
    /// Linear interpolation of `E[X_t]`.
    pub fn mean_x_at(&self, t: f64) -> Vec<f64> {
        interpolate(&self.times, &self.mean_x, t)
    }

    /// Linear interpolation of player `i`'s mean control.
    pub fn control_at(&self, i: usize, t: f64) -> Vec<f64> {
        interpolate(&self.times, &self.controls[i], t)
    }
}

fn interpolate(times: &[f64], values: &[Vec<f64>], t: f64) -> Vec<f64> {
    let last = times.len() - 1;
    if last == 0 || t <= times[0] {
        return values[0].clone();
    }
    if t >= times[last] {
        return values[last].clone();
    }
    let h = times[1] - times[0];
    let k = ((t / h).floor() as usize).min(last - 1);
    let w = (t - times[k]) / h;
    values[k].iter().zip(&values[k + 1]).map(|(a, b)| a + w * (b - a)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nonexistence {
    pub det: f64,
    /// 2-norm condition number of `B`.
    pub cond: f64,
    /// Product of the row norms of `B`.
    pub scale: f64,
    pub boundary: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum MeanOutcome {
    Solution(MeanSolution),
    Nonexistence(Nonexistence),
}

impl MeanOutcome {
    pub fn det(&self) -> f64 {
        match self {
            MeanOutcome::Solution(s) => s.det,
            MeanOutcome::Nonexistence(n) => n.det,
        }
    }
}

/// `(Φ(t), c(t))` with `w(t) = Φ(t) y + c(t)` for `w = (m, p̄_1, …, p̄_m)`.
struct Affine {
    phi: DMatrix<f64>,
    c: DVector<f64>,
}

fn generator(gs: &GameSpec, ks: &[DMatrix<f64>], t: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = gs.state_dim();
    let np = gs.player_count();
    let size = n * (np + 1);
    let mut l = DMatrix::zeros(size, size);
    let apd = gs.a.at(t).as_ref() + gs.d.at(t).as_ref();
    l.view_mut((0, 0), (n, n)).copy_from(&apd);
    for (i, (k, pl)) in ks.iter().zip(&gs.players).enumerate() {
        let o = n * (i + 1);
        l.view_mut((0, o), (n, n)).copy_from(&(-k));
        l.view_mut((o, o), (n, n)).copy_from(&(-apd.transpose()));
        let mg = pl.m.at(t).as_ref() + pl.gamma.at(t).as_ref();
        l.view_mut((o, 0), (n, n)).copy_from(&(-mg));
    }
    let mut b = DVector::zeros(size);
    b.rows_mut(0, n).copy_from(&gs.beta.at(t).column(0));
    (l, b)
}

/// Integrates the mean system backward from `T`, returning the affine
/// representation at `substeps + 1` uniform nodes (index 0 is `t = 0`).
fn integrate(gs: &GameSpec, substeps: usize) -> Result<Vec<Affine>> {
    let n = gs.state_dim();
    let np = gs.player_count();
    let size = n * (np + 1);
    let ks = gs.k_matrices()?;
    let mut phi = DMatrix::zeros(size, n);
    phi.view_mut((0, 0), (n, n)).fill_with_identity();
    for (i, pl) in gs.players.iter().enumerate() {
        phi.view_mut((n * (i + 1), 0), (n, n)).copy_from(&(&pl.q + &pl.r));
    }
    let mut c = DVector::zeros(size);
    let mut out = Vec::with_capacity(substeps + 1);
    out.push(Affine { phi: phi.clone(), c: c.clone() });
    if substeps > 0 {
        let h = gs.horizon / substeps as f64;
        // RK4 in reversed time s = T - t: dw/ds = -(L w + b)
        let rhs = |t: f64, phi: &DMatrix<f64>, c: &DVector<f64>| {
            let (l, b) = generator(gs, &ks, t);
            (-(&l * phi), -(&l * c + b))
        };
        for j in 0..substeps {
            let t = gs.horizon - j as f64 * h;
            let (k1p, k1c) = rhs(t, &phi, &c);
            let (k2p, k2c) = rhs(t - 0.5 * h, &(&phi + &k1p * (0.5 * h)), &(&c + &k1c * (0.5 * h)));
            let (k3p, k3c) = rhs(t - 0.5 * h, &(&phi + &k2p * (0.5 * h)), &(&c + &k2c * (0.5 * h)));
            let (k4p, k4c) = rhs(t - h, &(&phi + &k3p * h), &(&c + &k3c * h));
            phi += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
            c += (k1c + k2c * 2.0 + k3c * 2.0 + k4c) * (h / 6.0);
            out.push(Affine { phi: phi.clone(), c: c.clone() });
        }
    }
    if !out.iter().all(|a| a.phi.iter().chain(a.c.iter()).all(|v| v.is_finite())) {
        return Err(Error::NumericalBreakdown { stage: "mean", step: 0 });
    }
    out.reverse();
    Ok(out)
}

fn check_supported(gs: &GameSpec) -> Result<()> {
    gs.validate()?;
    if !gs.sigma.is_zero() {
        return Err(Error::Unsupported(
            "mean reduction needs sigma = 0: E[σᵀ q] is not a function of the means".into(),
        ));
    }
    Ok(())
}

/// `B` and `c` with `E[X_0] = B E[X_T] + c`.
pub fn boundary_matrix(gs: &GameSpec) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_supported(gs)?;
    let n = gs.state_dim();
    let first = integrate(gs, if gs.horizon > 0.0 { SUBSTEPS } else { 0 })?.swap_remove(0);
    Ok((first.phi.rows(0, n).into_owned(), first.c.rows(0, n).into_owned()))
}

/// Solves the mean boundary problem, reporting [`Nonexistence`] when
/// `|det B| < 1e-9 · Π_r ‖B_r‖`.
pub fn solve_mean_fbode(gs: &GameSpec) -> Result<MeanOutcome> {
    check_supported(gs)?;
    let n = gs.state_dim();
    let substeps = if gs.horizon > 0.0 { SUBSTEPS } else { 0 };
    let path = integrate(gs, substeps)?;
    let b = path[0].phi.rows(0, n).into_owned();
    let c0 = path[0].c.rows(0, n).into_owned();
    let det = b.determinant();
    let scale: f64 = b.row_iter().map(|r| r.norm()).product();
    let rows = b.row_iter().map(|r| r.iter().cloned().collect()).collect();
    if det.abs() < SINGULAR_TOL * scale || scale == 0.0 {
        let sv = b.clone().svd(false, false).singular_values;
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        return Ok(MeanOutcome::Nonexistence(Nonexistence { det, cond, scale, boundary: rows }));
    }
    let rhs = DVector::from_column_slice(&gs.x0) - c0;
    let y = b.clone().lu().solve(&rhs).ok_or(Error::NumericalBreakdown { stage: "mean", step: 0 })?;
    let gains = gs.players.iter().map(|p| p.gain()).collect::<Result<Vec<_>>>()?;
    let np = gs.player_count();
    let h = if substeps > 0 { gs.horizon / substeps as f64 } else { 0.0 };
    let mut sol = MeanSolution {
        times: (0..=substeps).map(|j| j as f64 * h).collect(),
        mean_x: Vec::with_capacity(substeps + 1),
        mean_p: vec![Vec::with_capacity(substeps + 1); np],
        controls: vec![Vec::with_capacity(substeps + 1); np],
        terminal_mean: y.iter().cloned().collect(),
        boundary: rows,
        det,
    };
    for a in &path {
        let w = &a.phi * &y + &a.c;
        sol.mean_x.push(w.rows(0, n).iter().cloned().collect());
        for (i, g) in gains.iter().enumerate() {
            let p = w.rows(n * (i + 1), n).into_owned();
            sol.controls[i].push((-(g * &p)).iter().cloned().collect());
            sol.mean_p[i].push(p.iter().cloned().collect());
        }
    }
    Ok(MeanOutcome::Solution(sol))
}
