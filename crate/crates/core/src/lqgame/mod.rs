//! Linear-quadratic mean-field nonzero-sum games.
//!
//! Player `i` controls `u_i` in
//!
//! ```text
//! dX = (A X + Σ C_k u_k + D E[X] + β) dt + (σ X + α) dW
//! ```
//!
//! with one-dimensional `W`, and minimizes
//!
//! ```text
//! J_i = ½ { E[X_Tᵀ Q_i X_T] + E[X_T]ᵀ R_i E[X_T]
//!           + E ∫ (Xᵀ M_i X + u_iᵀ N_i u_i + E[X]ᵀ Γ_i E[X]) dt }.
//! ```
//!
//! Open-loop Nash equilibria are `u_i = -N_i⁻¹ C_iᵀ p_i` with adjoints
//! `p_i`; the aggregate `(X, Σ K_i p_i, Σ K_i q_i)`, `K_i = C_i N_i⁻¹ C_iᵀ`,
//! solves a single mean-field backward-forward SDE.

mod conditions;
mod mean;
mod nash;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timepath::{matrix_from_rows, matrix_to_rows, TimePath};

pub use conditions::{build_aggregated, check_h2, Commutation, H2Report};
pub use mean::{boundary_matrix, solve_mean_fbode, MeanOutcome, MeanSolution, Nonexistence};
pub use nash::{
    cost, deviation_test, hamiltonian, solve_nash, CostEstimate, DeviationKind, DeviationOutcome, DeviationReport,
    NashResult, NashSummary,
};

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Player {
    /// `n x m_i`
    pub c: DMatrix<f64>,
    /// `m_i x m_i`, symmetric positive definite.
    pub n: DMatrix<f64>,
    pub m: TimePath,
    pub gamma: TimePath,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl Player {
    pub fn control_dim(&self) -> usize {
        self.c.ncols()
    }

    /// `K = C N⁻¹ Cᵀ`.
    pub fn k(&self) -> Result<DMatrix<f64>> {
        let chol = self.n.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("N".into()))?;
        Ok(&self.c * chol.solve(&self.c.transpose()))
    }

    /// `N⁻¹ Cᵀ`, so that `u = -gain · p`.
    pub fn gain(&self) -> Result<DMatrix<f64>> {
        let chol = self.n.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("N".into()))?;
        Ok(chol.solve(&self.c.transpose()))
    }
}

/// Game data. Coefficients are deterministic functions of time.
#[derive(Debug, Clone)]
pub struct GameSpec {
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub a: TimePath,
    pub d: TimePath,
    /// `n x 1`
    pub beta: TimePath,
    pub sigma: TimePath,
    /// `n x 1`
    pub alpha: TimePath,
    pub players: Vec<Player>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlayer {
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "N")]
    n: Vec<Vec<f64>>,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    m: Option<TimePath>,
    #[serde(rename = "Gamma", default, skip_serializing_if = "Option::is_none")]
    gamma: Option<TimePath>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    q: Option<Vec<Vec<f64>>>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    r: Option<Vec<Vec<f64>>>,
}

/// JSON form: `{n, m, T, x0, A, D, beta, sigma, alpha, players: [{C, N, M,
/// Gamma, Q, R}]}`; time-dependent entries are `{"const": ...}` or
/// `{"piecewise": [...]}`, missing ones are zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGame {
    n: usize,
    m: usize,
    #[serde(rename = "T")]
    horizon: f64,
    x0: Vec<f64>,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    a: Option<TimePath>,
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    d: Option<TimePath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<TimePath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<TimePath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<TimePath>,
    players: Vec<RawPlayer>,
}

fn check_shape(name: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::Config(format!("{name}: expected {}x{}, got {}x{}", want.0, want.1, got.0, got.1)));
    }
    Ok(())
}

fn path_matrices(p: &TimePath) -> Vec<DMatrix<f64>> {
    match p {
        TimePath::Const(m) => vec![m.clone()],
        TimePath::Piecewise(pieces) => pieces.iter().map(|(_, m)| m.clone()).collect(),
        TimePath::Func { .. } => Vec::new(),
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = 1.0 + m.amax();
    (m - m.transpose()).amax() <= SYMMETRY_TOL * scale
}

fn min_eigenvalue_sym(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.iter().cloned().fold(0.0, f64::max)
}

fn check_sym_nonneg(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !is_symmetric(m) {
        return Err(Error::Config(format!("{name} must be symmetric")));
    }
    if min_eigenvalue_sym(m) < -1e-10 * (1.0 + m.amax()) {
        return Err(Error::Config(format!("{name} must be nonnegative")));
    }
    Ok(())
}

impl GameSpec {
    pub fn state_dim(&self) -> usize {
        self.x0.len()
    }

    pub fn player_count(&self) -> usize {
        self.players.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x0.len();
        if n == 0 {
            return Err(Error::Config("x0 must be non-empty".into()));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("T must be nonnegative, got {}", self.horizon)));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("x0 must be finite".into()));
        }
        if self.players.is_empty() {
            return Err(Error::Config("at least one player is required".into()));
        }
        check_shape("A", self.a.shape(), (n, n))?;
        check_shape("D", self.d.shape(), (n, n))?;
        check_shape("sigma", self.sigma.shape(), (n, n))?;
        check_shape("beta", self.beta.shape(), (n, 1))?;
        check_shape("alpha", self.alpha.shape(), (n, 1))?;
        for (i, pl) in self.players.iter().enumerate() {
            let mi = pl.c.ncols();
            check_shape(&format!("players[{i}].C"), pl.c.shape(), (n, mi))?;
            check_shape(&format!("players[{i}].N"), pl.n.shape(), (mi, mi))?;
            check_shape(&format!("players[{i}].Q"), pl.q.shape(), (n, n))?;
            check_shape(&format!("players[{i}].R"), pl.r.shape(), (n, n))?;
            check_shape(&format!("players[{i}].M"), pl.m.shape(), (n, n))?;
            check_shape(&format!("players[{i}].Gamma"), pl.gamma.shape(), (n, n))?;
            if !is_symmetric(&pl.n) {
                return Err(Error::Config(format!("players[{i}].N must be symmetric")));
            }
            if pl.n.clone().cholesky().is_none() {
                return Err(Error::NotPositiveDefinite(format!("players[{i}].N")));
            }
            check_sym_nonneg(&format!("players[{i}].Q"), &pl.q)?;
            check_sym_nonneg(&format!("players[{i}].R"), &pl.r)?;
            for m in path_matrices(&pl.m) {
                check_sym_nonneg(&format!("players[{i}].M"), &m)?;
            }
            for g in path_matrices(&pl.gamma) {
                check_sym_nonneg(&format!("players[{i}].Gamma"), &g)?;
            }
        }
        Ok(())
    }

    pub fn from_raw(raw: RawGame) -> Result<Self> {
        let n = raw.n;
        if raw.x0.len() != n {
            return Err(Error::Config(format!("x0 has {} entries, n = {n}", raw.x0.len())));
        }
        if raw.players.len() != raw.m {
            return Err(Error::Config(format!("m = {} but {} player blocks given", raw.m, raw.players.len())));
        }
        let zeros = |r, c| TimePath::zeros(r, c);
        let mut players = Vec::with_capacity(raw.m);
        for (i, p) in raw.players.into_iter().enumerate() {
            let c = matrix_from_rows(&p.c).map_err(|e| Error::Config(format!("players[{i}].C: {e}")))?;
            let nm = matrix_from_rows(&p.n).map_err(|e| Error::Config(format!("players[{i}].N: {e}")))?;
            let opt = |m: &Option<Vec<Vec<f64>>>, name: &str| -> Result<DMatrix<f64>> {
                match m {
                    Some(rows) => matrix_from_rows(rows).map_err(|e| Error::Config(format!("players[{i}].{name}: {e}"))),
                    None => Ok(DMatrix::zeros(n, n)),
                }
            };
            players.push(Player {
                q: opt(&p.q, "Q")?,
                r: opt(&p.r, "R")?,
                c,
                n: nm,
                m: p.m.unwrap_or_else(|| zeros(n, n)),
                gamma: p.gamma.unwrap_or_else(|| zeros(n, n)),
            });
        }
        let spec = GameSpec {
            horizon: raw.horizon,
            x0: raw.x0,
            a: raw.a.unwrap_or_else(|| zeros(n, n)),
            d: raw.d.unwrap_or_else(|| zeros(n, n)),
            beta: raw.beta.unwrap_or_else(|| zeros(n, 1)),
            sigma: raw.sigma.unwrap_or_else(|| zeros(n, n)),
            alpha: raw.alpha.unwrap_or_else(|| zeros(n, 1)),
            players,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_raw(&self) -> RawGame {
        RawGame {
            n: self.state_dim(),
            m: self.player_count(),
            horizon: self.horizon,
            x0: self.x0.clone(),
            a: Some(self.a.clone()),
            d: Some(self.d.clone()),
            beta: Some(self.beta.clone()),
            sigma: Some(self.sigma.clone()),
            alpha: Some(self.alpha.clone()),
            players: self
                .players
                .iter()
                .map(|p| RawPlayer {
                    c: matrix_to_rows(&p.c),
                    n: matrix_to_rows(&p.n),
                    m: Some(p.m.clone()),
                    gamma: Some(p.gamma.clone()),
                    q: Some(matrix_to_rows(&p.q)),
                    r: Some(matrix_to_rows(&p.r)),
                })
                .collect(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_raw(serde_json::from_str(s)?)
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn k_matrices(&self) -> Result<Vec<DMatrix<f64>>> {
        self.players.iter().map(Player::k).collect()
    }

    /// Times at which time-dependent data is inspected: `samples + 1`
    /// uniform nodes plus every piece start.
    pub(crate) fn sample_times(&self, samples: usize) -> Vec<f64> {
        let t = self.horizon;
        let uniform = (0..=samples).map(|k| if samples == 0 { 0.0 } else { t * k as f64 / samples as f64 });
        let mut ts: Vec<f64> = uniform.collect();
        let mut paths: Vec<&TimePath> = vec![&self.a, &self.d, &self.beta, &self.sigma, &self.alpha];
        for p in &self.players {
            paths.push(&p.m);
            paths.push(&p.gamma);
        }
        for p in paths {
            if let TimePath::Piecewise(pieces) = p {
                ts.extend(pieces.iter().map(|(s, _)| *s).filter(|s| *s <= t));
            }
        }
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }

    /// `Σ_i K_i Q_i`, `Σ_i K_i R_i`.
    pub fn terminal_aggregates(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = self.state_dim();
        let ks = self.k_matrices()?;
        let mut kq = DMatrix::zeros(n, n);
        let mut kr = DMatrix::zeros(n, n);
        for (k, p) in ks.iter().zip(&self.players) {
            kq += k * &p.q;
            kr += k * &p.r;
        }
        Ok((kq, kr))
    }
}

impl Serialize for GameSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_raw().serialize(s)
    }
}

impl<'de> Deserialize<'de> for GameSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        GameSpec::from_raw(RawGame::deserialize(d)?).map_err(D::Error::custom)
    }
}

/// Two players steering a two-dimensional state with `A = I`, `D = -I`,
/// `α = (1, 1)`, `C_1 = (1, -2)ᵀ`, `C_2 = (-2, 1)ᵀ`, `N_i = 1`,
/// `Q_1 = diag(1, 0)`, `Q_2 = diag(0, 1)` and every other cost zero, from
/// `x0 = (1, 2)`. Its mean dynamics admit no equilibrium at `T = 1`.
pub fn example3(horizon: f64) -> GameSpec {
    let m = |r: usize, c: usize, v: &[f64]| DMatrix::from_row_slice(r, c, v);
    let zero2 = || TimePath::zeros(2, 2);
    GameSpec {
        horizon,
        x0: vec![1.0, 2.0],
        a: TimePath::Const(DMatrix::identity(2, 2)),
        d: TimePath::Const(-DMatrix::identity(2, 2)),
        beta: TimePath::zeros(2, 1),
        sigma: zero2(),
        alpha: TimePath::column(&[1.0, 1.0]),
        players: vec![
            Player {
                c: m(2, 1, &[1.0, -2.0]),
                n: m(1, 1, &[1.0]),
                m: zero2(),
                gamma: zero2(),
                q: m(2, 2, &[1.0, 0.0, 0.0, 0.0]),
                r: DMatrix::zeros(2, 2),
            },
            Player {
                c: m(2, 1, &[-2.0, 1.0]),
                n: m(1, 1, &[1.0]),
                m: zero2(),
                gamma: zero2(),
                q: m(2, 2, &[0.0, 0.0, 0.0, 1.0]),
                r: DMatrix::zeros(2, 2),
            },
        ],
    }
}

/// One-dimensional game with `m` identical players, `C = N = 1`,
/// `A = a`, noise `α`, costs `Q = M = 1` and no mean-field terms.
pub fn scalar_game(players: usize, a: f64, alpha: f64, x0: f64, horizon: f64) -> GameSpec {
    let s = |v: f64| DMatrix::from_element(1, 1, v);
    GameSpec {
        horizon,
        x0: vec![x0],
        a: TimePath::Const(s(a)),
        d: TimePath::zeros(1, 1),
        beta: TimePath::zeros(1, 1),
        sigma: TimePath::zeros(1, 1),
        alpha: TimePath::Const(s(alpha)),
        players: (0..players)
            .map(|_| Player {
                c: s(1.0),
                n: s(1.0),
                m: TimePath::Const(s(1.0)),
                gamma: TimePath::zeros(1, 1),
                q: s(1.0),
                r: s(0.0),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example3_k_matrices() {
        let g = example3(1.0);
        g.validate().unwrap();
        let k = g.k_matrices().unwrap();
        assert_eq!(k[0], DMatrix::from_row_slice(2, 2, &[1.0, -2.0, -2.0, 4.0]));
        assert_eq!(k[1], DMatrix::from_row_slice(2, 2, &[4.0, -2.0, -2.0, 1.0]));
        let (kq, kr) = g.terminal_aggregates().unwrap();
        assert_eq!(kq, DMatrix::from_row_slice(2, 2, &[1.0, -2.0, -2.0, 1.0]));
        assert_eq!(kr, DMatrix::zeros(2, 2));
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let json = r#"{"n": 1, "m": 1, "T": 1.0, "x0": [1.0],
            "A": {"const": [[0.5]]}, "alpha": {"const": [[0.5]]},
            "players": [{"C": [[1]], "N": [[1]], "Q": [[1]], "M": {"const": [[1]]}}]}"#;
        let g = GameSpec::from_json(json).unwrap();
        assert_eq!(g.player_count(), 1);
        assert!(g.d.is_zero() && g.players[0].r.iter().all(|v| *v == 0.0));
        let back = serde_json::to_string(&g).unwrap();
        let again = GameSpec::from_json(&back).unwrap();
        assert_eq!(again.players[0].q, g.players[0].q);
        assert_eq!(again.a.at(0.3)[(0, 0)], 0.5);
    }

    #[test]
    fn invalid_specs_rejected() {
        let missing_player = r#"{"n": 1, "m": 2, "T": 1.0, "x0": [1.0],
            "players": [{"C": [[1]], "N": [[1]]}]}"#;
        assert!(matches!(GameSpec::from_json(missing_player), Err(Error::Config(_))));
        let bad_n = r#"{"n": 1, "m": 1, "T": 1.0, "x0": [1.0], "players": [{"C": [[1]], "N": [[-1]]}]}"#;
        assert!(matches!(GameSpec::from_json(bad_n), Err(Error::NotPositiveDefinite(_))));
        let asym = r#"{"n": 2, "m": 1, "T": 1.0, "x0": [1.0, 0.0],
            "players": [{"C": [[1], [0]], "N": [[1]], "Q": [[1, 0.5], [0, 1]]}]}"#;
        assert!(matches!(GameSpec::from_json(asym), Err(Error::Config(_))));
        let shape = r#"{"n": 2, "m": 1, "T": 1.0, "x0": [1.0, 0.0], "A": {"const": [[1]]},
            "players": [{"C": [[1], [0]], "N": [[1]]}]}"#;
        assert!(GameSpec::from_json(shape).is_err());
        assert!(GameSpec::from_json("{\"n\": 1, ").is_err());
    }

    #[test]
    fn k_is_symmetric_psd_for_random_specs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (n, mi) = (rng.random_range(1..4), rng.random_range(1..3));
            let c = DMatrix::from_fn(n, mi, |_, _| rng.random_range(-2.0..2.0));
            let b = DMatrix::from_fn(mi, mi, |_, _| rng.random_range(-1.0..1.0));
            let nm = &b * b.transpose() + DMatrix::identity(mi, mi) * 0.1;
            let p = Player { c, n: nm, m: TimePath::zeros(n, n), gamma: TimePath::zeros(n, n), q: DMatrix::zeros(n, n), r: DMatrix::zeros(n, n) };
            let k = p.k().unwrap();
            assert!(is_symmetric(&k) || (&k - k.transpose()).amax() < 1e-10);
            assert!(min_eigenvalue_sym(&k) > -1e-10);
        }
    }

    #[test]
    fn sample_times_include_breakpoints() {
        let mut g = scalar_game(1, 0.0, 0.0, 1.0, 1.0);
        g.a = TimePath::piecewise(vec![(0.0, DMatrix::from_element(1, 1, 1.0)), (0.33, DMatrix::from_element(1, 1, 2.0))]).unwrap();
        let ts = g.sample_times(4);
        assert!(ts.contains(&0.33) && ts.contains(&1.0) && ts.len() == 6);
    }
}
