//! Mean-field backward-forward SDE problems: coefficients, structural
//! constants, the monotonicity functional and the contraction constants of
//! the measure-freezing scheme.
//!
//! The system is
//!
//! ```text
//! X_t = x0 + ∫ f(s, X, Y, Z, ν_s) ds + ∫ σ(s, X, Y, Z, ν_s) dW_s
//! Y_t = g(X_T, μ_T) - ∫_t^T h(s, X, Y, Z, ν_s) ds - ∫_t^T Z_s dW_s
//! ```
//!
//! with `ν_s` the joint law of `(X_s, Y_s)` and `μ_T` the law of `X_T`.

use std::f64::consts::SQRT_2;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::timepath::{gemv_add, TimePath};

/// The argument `u = (x, y, z)`; `z` is an `m x d` matrix stored row-major.
#[derive(Debug, Clone, Copy)]
pub struct State<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
}

/// Coefficients `(f, σ, h, g)` of a problem.
///
/// Implementations write into `out` (which arrives zeroed) and must be pure:
/// the solver calls them concurrently across particles. `law` is the joint
/// `(X, Y)` cloud for `f, σ, h` and the `X` cloud for `g`. The diffusion
/// receives `None` when the problem declares a law-free `σ`.
pub trait Coefficients: Send + Sync {
    fn drift(&self, t: f64, u: State<'_>, law: &EmpiricalMeasure, out: &mut [f64]);
    fn diffusion(&self, t: f64, u: State<'_>, law: Option<&EmpiricalMeasure>, out: &mut [f64]);
    fn driver(&self, t: f64, u: State<'_>, law: &EmpiricalMeasure, out: &mut [f64]);
    fn terminal(&self, x: &[f64], law: &EmpiricalMeasure, out: &mut [f64]);
}

type FieldFn = dyn Fn(f64, State<'_>, &EmpiricalMeasure, &mut [f64]) + Send + Sync;
type DiffusionFn = dyn Fn(f64, State<'_>, Option<&EmpiricalMeasure>, &mut [f64]) + Send + Sync;
type TerminalFn = dyn Fn(&[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync;

/// Closure-backed [`Coefficients`].
pub struct FnCoefficients {
    drift: Box<FieldFn>,
    diffusion: Box<DiffusionFn>,
    driver: Box<FieldFn>,
    terminal: Box<TerminalFn>,
}

impl FnCoefficients {
    pub fn new<F, S, H, G>(drift: F, diffusion: S, driver: H, terminal: G) -> Self
    where
        F: Fn(f64, State<'_>, &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static,
        S: Fn(f64, State<'_>, Option<&EmpiricalMeasure>, &mut [f64]) + Send + Sync + 'static,
        H: Fn(f64, State<'_>, &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static,
        G: Fn(&[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            drift: Box::new(drift),
            diffusion: Box::new(diffusion),
            driver: Box::new(driver),
            terminal: Box::new(terminal),
        }
    }
}

impl Coefficients for FnCoefficients {
    fn drift(&self, t: f64, u: State<'_>, law: &EmpiricalMeasure, out: &mut [f64]) {
        (self.drift)(t, u, law, out)
    }
    fn diffusion(&self, t: f64, u: State<'_>, law: Option<&EmpiricalMeasure>, out: &mut [f64]) {
        (self.diffusion)(t, u, law, out)
    }
    fn driver(&self, t: f64, u: State<'_>, law: &EmpiricalMeasure, out: &mut [f64]) {
        (self.driver)(t, u, law, out)
    }
    fn terminal(&self, x: &[f64], law: &EmpiricalMeasure, out: &mut [f64]) {
        (self.terminal)(x, law, out)
    }
}

/// Lipschitz constants of the coefficients; `c_u`, `c_nu` are common to
/// `f, h, σ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzProfile {
    pub c_u: f64,
    pub c_nu: f64,
    pub c_g_x: f64,
    pub c_g_nu: f64,
}

impl LipschitzProfile {
    pub fn new(c_u: f64, c_nu: f64, c_g_x: f64, c_g_nu: f64) -> Result<Self> {
        let p = Self { c_u, c_nu, c_g_x, c_g_nu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.c_u, self.c_nu, self.c_g_x, self.c_g_nu].iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(Error::InvalidParameter("Lipschitz constants must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Which monotonicity hypothesis is assumed: `H1` penalises `z` in the
/// operator bound, `H1prime` (law-free diffusion) does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    H1,
    #[serde(rename = "H1prime")]
    H1Prime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityProfile {
    pub k: f64,
    pub k_prime: f64,
    pub variant: Variant,
}

impl MonotonicityProfile {
    pub fn new(k: f64, k_prime: f64, variant: Variant) -> Result<Self> {
        let p = Self { k, k_prime, variant };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k_prime > 0.0 && self.k.is_finite() && self.k_prime.is_finite()) {
            return Err(Error::InvalidParameter("monotonicity constants must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct MfProblem {
    pub state_dim: usize,
    pub noise_dim: usize,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub coefficients: Arc<dyn Coefficients>,
    pub law_free_sigma: bool,
    pub lipschitz: Option<LipschitzProfile>,
    pub monotonicity: Option<MonotonicityProfile>,
}

impl std::fmt::Debug for MfProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfProblem")
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .field("law_free_sigma", &self.law_free_sigma)
            .field("lipschitz", &self.lipschitz)
            .field("monotonicity", &self.monotonicity)
            .finish_non_exhaustive()
    }
}

impl MfProblem {
    pub fn new(
        noise_dim: usize,
        x0: Vec<f64>,
        horizon: f64,
        coefficients: Arc<dyn Coefficients>,
    ) -> Result<Self> {
        if x0.is_empty() || noise_dim == 0 {
            return Err(Error::InvalidParameter("state and noise dimensions must be positive".into()));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial state".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            state_dim: x0.len(),
            noise_dim,
            x0,
            horizon,
            coefficients,
            law_free_sigma: false,
            lipschitz: None,
            monotonicity: None,
        })
    }

    pub fn with_law_free_sigma(mut self, law_free: bool) -> Self {
        self.law_free_sigma = law_free;
        self
    }

    pub fn with_lipschitz(mut self, p: LipschitzProfile) -> Result<Self> {
        p.validate()?;
        self.lipschitz = Some(p);
        Ok(self)
    }

    pub fn with_monotonicity(mut self, p: MonotonicityProfile) -> Result<Self> {
        p.validate()?;
        self.monotonicity = Some(p);
        Ok(self)
    }

    /// Number of entries of `z` (and of `σ`).
    pub fn z_len(&self) -> usize {
        self.state_dim * self.noise_dim
    }

    pub(crate) fn diffusion_law<'a>(&self, law: &'a EmpiricalMeasure) -> Option<&'a EmpiricalMeasure> {
        if self.law_free_sigma {
            None
        } else {
            Some(law)
        }
    }

    pub fn drift(&self, t: f64, u: State<'_>, law: &EmpiricalMeasure) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim];
        self.coefficients.drift(t, u, law, &mut out);
        out
    }

    pub fn diffusion(&self, t: f64, u: State<'_>, law: &EmpiricalMeasure) -> Vec<f64> {
        let mut out = vec![0.0; self.z_len()];
        self.coefficients.diffusion(t, u, self.diffusion_law(law), &mut out);
        out
    }

    pub fn driver(&self, t: f64, u: State<'_>, law: &EmpiricalMeasure) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim];
        self.coefficients.driver(t, u, law, &mut out);
        out
    }

    pub fn terminal(&self, x: &[f64], law: &EmpiricalMeasure) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim];
        self.coefficients.terminal(x, law, &mut out);
        out
    }

    fn check_state(&self, u: State<'_>) -> Result<()> {
        let m = self.state_dim;
        for (len, want) in [(u.x.len(), m), (u.y.len(), m), (u.z.len(), self.z_len())] {
            if len != want {
                return Err(Error::DimensionMismatch { expected: want, got: len });
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// The monotonicity functional
/// `(f(u) - f(u'))·(y - y') + (h(u) - h(u'))·(x - x') + [σ(u) - σ(u'), z - z']`
/// at a fixed time and law.
pub fn eval_a(p: &MfProblem, t: f64, u: State<'_>, u_prime: State<'_>, nu: &EmpiricalMeasure) -> Result<f64> {
    p.check_state(u)?;
    p.check_state(u_prime)?;
    if nu.dim() != 2 * p.state_dim {
        return Err(Error::DimensionMismatch { expected: 2 * p.state_dim, got: nu.dim() });
    }
    let df = diff(&p.drift(t, u, nu), &p.drift(t, u_prime, nu));
    let dh = diff(&p.driver(t, u, nu), &p.driver(t, u_prime, nu));
    let ds = diff(&p.diffusion(t, u, nu), &p.diffusion(t, u_prime, nu));
    // [A, B] = sum of column inner products = Frobenius product
    Ok(dot(&df, &diff(u.y, u_prime.y)) + dot(&dh, &diff(u.x, u_prime.x)) + dot(&ds, &diff(u.z, u_prime.z)))
}

/// Outcome of randomized probing of the monotonicity hypotheses. Passing
/// means "probed, not proven".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub variant: Variant,
    pub probes: usize,
    pub k_declared: Option<f64>,
    pub k_prime_declared: Option<f64>,
    /// Infimum over probes of `-A / norm`.
    pub k_estimate: f64,
    /// Infimum over probes of `(g(x) - g(x'))·(x - x') / |x - x'|^2`.
    pub k_prime_estimate: f64,
    /// Smallest `-A - k·norm` seen (declared `k`, or 0 when undeclared).
    pub worst_margin_operator: f64,
    pub worst_margin_terminal: f64,
    pub pass_operator: bool,
    pub pass_terminal: bool,
    pub pass: bool,
}

const PROBE_CLOUD: usize = 64;

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Probes (H1)/(H1′) with standard Gaussian arguments and Gaussian clouds of
/// 64 points. The variant comes from the declared monotonicity profile
/// (H1′ when the diffusion is law free and nothing is declared, else H1).
pub fn check_h1(p: &MfProblem, samples: usize, seed: u64) -> Result<MonotonicityReport> {
    if samples == 0 {
        return Err(Error::InvalidParameter("at least one probe is required".into()));
    }
    let variant = p
        .monotonicity
        .map(|m| m.variant)
        .unwrap_or(if p.law_free_sigma { Variant::H1Prime } else { Variant::H1 });
    let k_declared = p.monotonicity.map(|m| m.k);
    let kp_declared = p.monotonicity.map(|m| m.k_prime);
    let m = p.state_dim;
    let zl = p.z_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut k_est = f64::INFINITY;
    let mut kp_est = f64::INFINITY;
    let mut margin_a = f64::INFINITY;
    let mut margin_g = f64::INFINITY;
    let mut pass_a = true;
    let mut pass_g = true;
    for _ in 0..samples {
        let t = rng.random::<f64>() * p.horizon;
        let nu = EmpiricalMeasure::from_flat(2 * m, gaussian_vec(&mut rng, PROBE_CLOUD * 2 * m))?;
        let (x, y, z) = (gaussian_vec(&mut rng, m), gaussian_vec(&mut rng, m), gaussian_vec(&mut rng, zl));
        let (xp, yp, zp) = (gaussian_vec(&mut rng, m), gaussian_vec(&mut rng, m), gaussian_vec(&mut rng, zl));
        let u = State { x: &x, y: &y, z: &z };
        let up = State { x: &xp, y: &yp, z: &zp };
        let a = eval_a(p, t, u, up, &nu)?;
        let dx2 = dot(&diff(&x, &xp), &diff(&x, &xp));
        let dy2 = dot(&diff(&y, &yp), &diff(&y, &yp));
        let dz2 = dot(&diff(&z, &zp), &diff(&z, &zp));
        let norm = match variant {
            Variant::H1 => dx2 + dy2 + dz2,
            Variant::H1Prime => dx2 + dy2,
        };
        k_est = k_est.min(-a / norm);
        let margin = -a - k_declared.unwrap_or(0.0) * norm;
        margin_a = margin_a.min(margin);
        let slack = 1e-10 * (1.0 + norm);
        if margin < -slack || (k_declared.is_none() && margin <= 0.0) {
            pass_a = false;
        }

        let mu = EmpiricalMeasure::from_flat(m, gaussian_vec(&mut rng, PROBE_CLOUD * m))?;
        let (gx, gxp) = (p.terminal(&x, &mu), p.terminal(&xp, &mu));
        let lhs = dot(&diff(&gx, &gxp), &diff(&x, &xp));
        kp_est = kp_est.min(lhs / dx2);
        let margin = lhs - kp_declared.unwrap_or(0.0) * dx2;
        margin_g = margin_g.min(margin);
        if margin < -1e-10 * (1.0 + dx2) || (kp_declared.is_none() && margin <= 0.0) {
            pass_g = false;
        }
    }
    Ok(MonotonicityReport {
        variant,
        probes: samples,
        k_declared,
        k_prime_declared: kp_declared,
        k_estimate: k_est,
        k_prime_estimate: kp_est,
        worst_margin_operator: margin_a,
        worst_margin_terminal: margin_g,
        pass_operator: pass_a,
        pass_terminal: pass_g,
        pass: pass_a && pass_g,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionConstants {
    pub c_nu: f64,
    pub c_g_nu: f64,
}

/// Smallness condition on the law-Lipschitz constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub variant: Variant,
    /// Existence theorem the condition feeds: general diffusion (H1) or
    /// law-free diffusion (H1′).
    pub theorem: String,
    pub bound: f64,
    pub constants: ConditionConstants,
    pub margins: ConditionConstants,
    pub pass: bool,
}

/// `C^ν, C_g^ν < min{(√3−1)k′, (√3/3)k}` under H1 and
/// `C^ν, C_g^ν < min{2(√2−1)k′, (√2/2)k}` under H1′.
pub fn smallness_bound(mono: &MonotonicityProfile) -> f64 {
    let sqrt3 = 3f64.sqrt();
    match mono.variant {
        Variant::H1 => ((sqrt3 - 1.0) * mono.k_prime).min(sqrt3 / 3.0 * mono.k),
        Variant::H1Prime => (2.0 * (SQRT_2 - 1.0) * mono.k_prime).min(SQRT_2 / 2.0 * mono.k),
    }
}

pub fn check_smallness(prof: &LipschitzProfile, mono: &MonotonicityProfile) -> ConditionReport {
    let bound = smallness_bound(mono);
    let margins = ConditionConstants { c_nu: bound - prof.c_nu, c_g_nu: bound - prof.c_g_nu };
    ConditionReport {
        variant: mono.variant,
        theorem: match mono.variant {
            Variant::H1 => "general diffusion (H1)".into(),
            Variant::H1Prime => "law-free diffusion (H1prime)".into(),
        },
        bound,
        constants: ConditionConstants { c_nu: prof.c_nu, c_g_nu: prof.c_g_nu },
        margins,
        pass: margins.c_nu > 0.0 && margins.c_g_nu > 0.0,
    }
}

/// Free parameters of the contraction estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YoungParams {
    pub eps: f64,
    pub alpha: f64,
    pub rho: f64,
    pub delta: f64,
}

impl YoungParams {
    /// The choice under which the closed-form smallness conditions are exact:
    /// `ε = 1, ρ = 1`, `α = √3/3` for H1 and `α = √2/2` for H1′.
    pub fn canonical(variant: Variant, delta: f64) -> Self {
        let alpha = match variant {
            Variant::H1 => 3f64.sqrt() / 3.0,
            Variant::H1Prime => SQRT_2 / 2.0,
        };
        Self { eps: 1.0, alpha, rho: 1.0, delta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionConstants {
    pub lambda: f64,
    pub theta: f64,
}

impl ContractionConstants {
    /// `θ/λ`, or `None` when `λ ≤ 0` and the estimate says nothing.
    pub fn ratio(&self) -> Option<f64> {
        (self.lambda > 0.0).then(|| self.theta / self.lambda)
    }

    pub fn contracts(&self) -> bool {
        self.lambda > 0.0 && self.theta < self.lambda
    }
}

/// `(λ, θ)` such that successive Cauchy gaps of the scheme satisfy
/// `gap(n+1) ≤ (θ/λ) gap(n)`.
pub fn contraction_constants(
    prof: &LipschitzProfile,
    mono: &MonotonicityProfile,
    params: YoungParams,
) -> Result<ContractionConstants> {
    let YoungParams { eps, alpha, rho, delta } = params;
    if !(eps > 0.0 && alpha > 0.0 && rho > 0.0 && delta > 0.0) {
        return Err(Error::InvalidParameter("ε, α, ρ, δ must be positive".into()));
    }
    let (k, kp, c, cg) = (mono.k, mono.k_prime, prof.c_nu, prof.c_g_nu);
    let terminal_lambda = kp - cg * eps / 2.0;
    let terminal_theta = cg / (2.0 * eps);
    Ok(match mono.variant {
        Variant::H1 => ContractionConstants {
            lambda: terminal_lambda
                .min(k - c / (2.0 * alpha))
                .min(delta * (1.0 - rho / 2.0) + k - c / (2.0 * alpha)),
            theta: terminal_theta.max(delta / (2.0 * rho) + 1.5 * alpha * c),
        },
        Variant::H1Prime => ContractionConstants {
            lambda: terminal_lambda.min(delta / 2.0 + k - c / (2.0 * alpha)),
            theta: terminal_theta.max(delta / 2.0 + alpha * c),
        },
    })
}

/// One affine coefficient block
/// `M_x x + M_y y + M_z vec(z) + M_mx E[X] + M_my E[Y] + c`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineMap {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<TimePath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<TimePath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<TimePath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_x: Option<TimePath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_y: Option<TimePath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<TimePath>,
}

impl AffineMap {
    fn validate(&self, name: &str, rows: usize, m: usize, zl: usize) -> Result<()> {
        let blocks = [
            ("x", &self.x, m),
            ("y", &self.y, m),
            ("z", &self.z, zl),
            ("mean_x", &self.mean_x, m),
            ("mean_y", &self.mean_y, m),
            ("constant", &self.constant, 1),
        ];
        for (field, block, cols) in blocks {
            if let Some(path) = block {
                if path.shape() != (rows, cols) {
                    return Err(Error::Config(format!(
                        "{name}.{field}: expected {rows}x{cols}, got {:?}",
                        path.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    fn depends_on_law(&self) -> bool {
        self.mean_x.as_ref().is_some_and(|p| !p.is_zero()) || self.mean_y.as_ref().is_some_and(|p| !p.is_zero())
    }

    fn apply(&self, t: f64, u: State<'_>, law_mean: Option<&[f64]>, out: &mut [f64]) {
        let m = u.x.len();
        if let Some(p) = &self.x {
            gemv_add(&p.at(t), u.x, out);
        }
        if let Some(p) = &self.y {
            gemv_add(&p.at(t), u.y, out);
        }
        if let Some(p) = &self.z {
            gemv_add(&p.at(t), u.z, out);
        }
        if let Some(mean) = law_mean {
            if let Some(p) = &self.mean_x {
                gemv_add(&p.at(t), &mean[..m], out);
            }
            if let Some(p) = &self.mean_y {
                gemv_add(&p.at(t), &mean[m..2 * m], out);
            }
        }
        if let Some(p) = &self.constant {
            let c = p.at(t);
            for (o, v) in out.iter_mut().zip(c.iter()) {
                *o += v;
            }
        }
    }
}

/// Terminal map `G_x x + G_m E[X_T] + c`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineTerminal {
    pub x: Option<TimePath>,
    #[serde(default)]
    pub mean_x: Option<TimePath>,
    #[serde(default)]
    pub constant: Option<TimePath>,
}

/// Affine problem with deterministic piecewise-constant coefficients, the
/// form accepted by config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSpec {
    pub horizon: f64,
    pub x0: Vec<f64>,
    #[serde(default = "default_noise_dim")]
    pub noise_dim: usize,
    #[serde(default)]
    pub drift: AffineMap,
    /// Rows index `vec(σ)` (row-major `m x d`).
    #[serde(default)]
    pub diffusion: AffineMap,
    #[serde(default)]
    pub driver: AffineMap,
    #[serde(default)]
    pub terminal: AffineTerminal,
    #[serde(default)]
    pub lipschitz: Option<LipschitzProfile>,
    #[serde(default)]
    pub monotonicity: Option<MonotonicityProfile>,
}

fn default_noise_dim() -> usize {
    1
}

#[derive(Debug, Clone)]
pub struct AffineCoefficients {
    spec: AffineSpec,
}

impl Coefficients for AffineCoefficients {
    fn drift(&self, t: f64, u: State<'_>, law: &EmpiricalMeasure, out: &mut [f64]) {
        self.spec.drift.apply(t, u, Some(law.mean()), out)
    }
    fn diffusion(&self, t: f64, u: State<'_>, law: Option<&EmpiricalMeasure>, out: &mut [f64]) {
        self.spec.diffusion.apply(t, u, law.map(|l| l.mean()), out)
    }
    fn driver(&self, t: f64, u: State<'_>, law: &EmpiricalMeasure, out: &mut [f64]) {
        self.spec.driver.apply(t, u, Some(law.mean()), out)
    }
    fn terminal(&self, x: &[f64], law: &EmpiricalMeasure, out: &mut [f64]) {
        let term = &self.spec.terminal;
        let t = self.spec.horizon;
        if let Some(p) = &term.x {
            gemv_add(&p.at(t), x, out);
        }
        if let Some(p) = &term.mean_x {
            gemv_add(&p.at(t), law.mean(), out);
        }
        if let Some(p) = &term.constant {
            for (o, v) in out.iter_mut().zip(p.at(t).iter()) {
                *o += v;
            }
        }
    }
}

impl AffineSpec {
    pub fn build(&self) -> Result<MfProblem> {
        let m = self.x0.len();
        if m == 0 {
            return Err(Error::Config("x0 must be non-empty".into()));
        }
        if self.noise_dim == 0 {
            return Err(Error::Config("noise_dim must be positive".into()));
        }
        let zl = m * self.noise_dim;
        self.drift.validate("drift", m, m, zl)?;
        self.diffusion.validate("diffusion", zl, m, zl)?;
        self.driver.validate("driver", m, m, zl)?;
        for (field, block, cols) in
            [("x", &self.terminal.x, m), ("mean_x", &self.terminal.mean_x, m), ("constant", &self.terminal.constant, 1)]
        {
            if let Some(p) = block {
                if p.shape() != (m, cols) {
                    return Err(Error::Config(format!("terminal.{field}: expected {m}x{cols}, got {:?}", p.shape())));
                }
            }
        }
        let law_free = !self.diffusion.depends_on_law();
        let mut p = MfProblem::new(
            self.noise_dim,
            self.x0.clone(),
            self.horizon,
            Arc::new(AffineCoefficients { spec: self.clone() }),
        )?
        .with_law_free_sigma(law_free);
        if let Some(l) = self.lipschitz {
            p = p.with_lipschitz(l)?;
        }
        if let Some(mo) = self.monotonicity {
            p = p.with_monotonicity(mo)?;
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn scalar(v: f64) -> Option<TimePath> {
        Some(TimePath::Const(DMatrix::from_element(1, 1, v)))
    }

    /// f = a x − y + c_f E[x], σ = s, h = −a y − x + c_h E[y], g = x + c_g E[x]
    fn toy(a: f64, c_f: f64, c_h: f64, c_g: f64) -> MfProblem {
        AffineSpec {
            horizon: 1.0,
            x0: vec![1.0],
            noise_dim: 1,
            drift: AffineMap { x: scalar(a), y: scalar(-1.0), mean_x: scalar(c_f), ..Default::default() },
            diffusion: AffineMap { constant: scalar(0.5), ..Default::default() },
            driver: AffineMap { x: scalar(-1.0), y: scalar(-a), mean_y: scalar(c_h), ..Default::default() },
            terminal: AffineTerminal { x: scalar(1.0), mean_x: scalar(c_g), constant: None },
            lipschitz: None,
            monotonicity: None,
        }
        .build()
        .unwrap()
    }

    fn point_cloud(dim: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::point_mass(&vec![0.0; dim], 1).unwrap()
    }

    #[test]
    fn eval_a_identical_arguments_is_zero() {
        let p = toy(0.3, 0.1, 0.1, 0.1);
        let u = State { x: &[0.7], y: &[-1.2], z: &[0.4] };
        assert_eq!(eval_a(&p, 0.5, u, u, &point_cloud(2)).unwrap(), 0.0);
    }

    #[test]
    fn eval_a_linear_in_y_only() {
        // f = −y, h = 0, σ = const: A = −|y − y'|^2
        let coeffs = FnCoefficients::new(
            |_, u, _, out| out[0] = -u.y[0],
            |_, _, _, out| out[0] = 1.0,
            |_, _, _, _| {},
            |x, _, out| out[0] = x[0],
        );
        let p = MfProblem::new(1, vec![0.0], 1.0, Arc::new(coeffs)).unwrap();
        let u = State { x: &[0.3], y: &[2.0], z: &[5.0] };
        let up = State { x: &[-1.0], y: &[-0.5], z: &[1.0] };
        let a = eval_a(&p, 0.0, u, up, &point_cloud(2)).unwrap();
        assert!((a + 2.5 * 2.5).abs() < 1e-14);
    }

    #[test]
    fn eval_a_dimension_errors() {
        let p = toy(0.0, 0.0, 0.0, 0.0);
        let u = State { x: &[0.0, 1.0], y: &[0.0], z: &[0.0] };
        let ok = State { x: &[0.0], y: &[0.0], z: &[0.0] };
        assert!(eval_a(&p, 0.0, u, ok, &point_cloud(2)).is_err());
        assert!(eval_a(&p, 0.0, ok, ok, &point_cloud(3)).is_err());
    }

    #[test]
    fn toy_problem_is_h1prime_with_unit_constants() {
        let p = toy(0.4, 0.1, 0.1, 0.1);
        assert!(p.law_free_sigma);
        let r = check_h1(&p, 2000, 1).unwrap();
        assert_eq!(r.variant, Variant::H1Prime);
        assert!((r.k_estimate - 1.0).abs() < 1e-9, "{r:?}");
        assert!((r.k_prime_estimate - 1.0).abs() < 1e-9);
        assert!(r.pass);
    }

    #[test]
    fn identity_terminal_gives_unit_k_prime() {
        let p = toy(0.0, 0.0, 0.0, 0.0);
        let r = check_h1(&p, 100, 9).unwrap();
        assert!((r.k_prime_estimate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn declared_constant_too_large_fails_probe() {
        let p = toy(0.0, 0.0, 0.0, 0.0)
            .with_monotonicity(MonotonicityProfile::new(1.5, 1.0, Variant::H1Prime).unwrap())
            .unwrap();
        let r = check_h1(&p, 200, 2).unwrap();
        assert!(!r.pass_operator);
        assert!(r.pass_terminal);
        assert!(r.worst_margin_operator < 0.0);
        assert!(check_h1(&p, 0, 2).is_err());
    }

    #[test]
    fn smallness_examples() {
        let zero = LipschitzProfile::new(0.0, 0.0, 1.0, 0.0).unwrap();
        let mono = MonotonicityProfile::new(0.3, 2.0, Variant::H1).unwrap();
        assert!(check_smallness(&zero, &mono).pass);

        let prof = LipschitzProfile::new(1.0, 0.1, 1.0, 0.1).unwrap();
        let mono = MonotonicityProfile::new(1.0, 1.0, Variant::H1Prime).unwrap();
        let r = check_smallness(&prof, &mono);
        assert!((r.bound - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(r.pass);

        let prof = LipschitzProfile::new(1.0, 0.6, 1.0, 0.0).unwrap();
        let mono = MonotonicityProfile::new(1.0, 1.0, Variant::H1).unwrap();
        let r = check_smallness(&prof, &mono);
        assert!((r.bound - 0.5774).abs() < 1e-4);
        assert!(!r.pass);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["variant", "bound", "constants", "margins", "pass"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn contraction_constants_h1prime_example() {
        let prof = LipschitzProfile::new(1.0, 0.1, 1.0, 0.1).unwrap();
        let mono = MonotonicityProfile::new(1.0, 1.0, Variant::H1Prime).unwrap();
        let c = contraction_constants(&prof, &mono, YoungParams { eps: 1.0, alpha: SQRT_2 / 2.0, rho: 1.0, delta: 0.01 })
            .unwrap();
        // λ = min{1 − 0.05, 0.005 + 1 − 0.1/√2}, θ = max{0.05, 0.005 + 0.1/√2}
        let lambda = (1.0f64 - 0.05).min(0.005 + 1.0 - 0.1 / SQRT_2);
        let theta = 0.05f64.max(0.005 + 0.1 / SQRT_2);
        assert!((c.lambda - lambda).abs() < 1e-15);
        assert!((c.theta - theta).abs() < 1e-15);
        assert!((c.lambda - 0.9343).abs() < 1e-4);
        assert!((c.theta - 0.0757).abs() < 1e-4);
        assert!((c.ratio().unwrap() - 0.081).abs() < 1e-3);
    }

    #[test]
    fn contraction_without_coupling() {
        let prof = LipschitzProfile::new(1.0, 0.0, 1.0, 0.0).unwrap();
        let mono = MonotonicityProfile::new(0.7, 0.4, Variant::H1Prime).unwrap();
        for delta in [1e-1, 1e-3, 1e-6] {
            let c = contraction_constants(&prof, &mono, YoungParams { eps: 1.0, alpha: 1.0, rho: 1.0, delta }).unwrap();
            assert_eq!(c.theta, delta / 2.0);
            assert_eq!(c.lambda, 0.4f64.min(delta / 2.0 + 0.7));
        }
        let bad = YoungParams { eps: 0.0, alpha: 1.0, rho: 1.0, delta: 0.1 };
        assert!(contraction_constants(&prof, &mono, bad).is_err());
    }

    #[test]
    fn canonical_parameters_reproduce_closed_form_conditions() {
        // At ε = 1, ρ = 1 and the canonical α, the δ → 0 contraction
        // inequality θ < λ is equivalent to the closed-form smallness bound.
        for variant in [Variant::H1, Variant::H1Prime] {
            for (k, kp) in [(1.0, 1.0), (0.5, 2.0), (3.0, 0.7)] {
                let mono = MonotonicityProfile::new(k, kp, variant).unwrap();
                let bound = smallness_bound(&mono);
                let params = YoungParams::canonical(variant, 1e-9);
                let inside = LipschitzProfile::new(1.0, 0.999 * bound, 1.0, 0.999 * bound).unwrap();
                assert!(contraction_constants(&inside, &mono, params).unwrap().contracts());
                let outside = LipschitzProfile::new(1.0, 1.001 * bound, 1.0, 1.001 * bound).unwrap();
                assert!(!contraction_constants(&outside, &mono, params).unwrap().contracts());
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn grid_search(prof: &LipschitzProfile, mono: &MonotonicityProfile) -> bool {
            let eps_grid = (1..=40).map(|i| 0.05 * i as f64);
            for eps in eps_grid {
                for j in 1..=40 {
                    let alpha = 0.05 * j as f64;
                    for rho in [0.5, 1.0, 1.5] {
                        let params = YoungParams { eps, alpha, rho, delta: 1e-8 };
                        if contraction_constants(prof, mono, params).unwrap().contracts() {
                            return true;
                        }
                    }
                }
            }
            false
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn smallness_implies_contraction_parameters_exist(
                k in 0.2f64..3.0, kp in 0.2f64..3.0, fc in 0.0f64..0.98, fg in 0.0f64..0.98, h1 in any::<bool>()
            ) {
                let variant = if h1 { Variant::H1 } else { Variant::H1Prime };
                let mono = MonotonicityProfile::new(k, kp, variant).unwrap();
                let bound = smallness_bound(&mono);
                let prof = LipschitzProfile::new(1.0, fc * bound, 1.0, fg * bound).unwrap();
                prop_assert!(check_smallness(&prof, &mono).pass);
                prop_assert!(grid_search(&prof, &mono));
            }

            #[test]
            fn eval_a_matches_bilinear_expansion(
                a in -2.0f64..2.0, cf in -1.0f64..1.0, ch in -1.0f64..1.0,
                x in -3.0f64..3.0, y in -3.0f64..3.0, xp in -3.0f64..3.0, yp in -3.0f64..3.0
            ) {
                // affine toy: A = −(Δy)^2 − (Δx)^2 independent of a and the law terms
                let p = toy(a, cf, ch, 0.0);
                let nu = EmpiricalMeasure::new(&[vec![x, y], vec![yp, xp]]).unwrap();
                let v = eval_a(&p, 0.1, State { x: &[x], y: &[y], z: &[0.3] }, State { x: &[xp], y: &[yp], z: &[-0.2] }, &nu).unwrap();
                let expected = -(y - yp).powi(2) - (x - xp).powi(2);
                prop_assert!((v - expected).abs() < 1e-10);
            }
        }
    }
}
