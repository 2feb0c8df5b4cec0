//! Global polynomial least-squares regression used for conditional
//! expectations in the backward recursion.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polynomial basis in the state components. Without cross terms only pure
/// powers `x_j^e` appear; with them every monomial of total degree `≤ degree`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub degree: u32,
    #[serde(default)]
    pub include_cross: bool,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self { degree: 1, include_cross: false }
    }
}

impl RegressionBasis {
    pub fn new(degree: u32, include_cross: bool) -> Self {
        Self { degree, include_cross }
    }

    /// Exponent tuples of the non-constant monomials in `dim` variables.
    pub fn exponents(&self, dim: usize) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        let mut cur = vec![0u32; dim];
        fn rec(j: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>, cross: bool, total: u32) {
            if j == cur.len() {
                let nonzero = cur.iter().filter(|e| **e > 0).count();
                if total > 0 && (cross || nonzero <= 1) {
                    out.push(cur.clone());
                }
                return;
            }
            for e in 0..=left {
                cur[j] = e;
                rec(j + 1, left - e, cur, out, cross, total + e);
            }
            cur[j] = 0;
        }
        rec(0, self.degree, &mut cur, &mut out, self.include_cross, 0);
        out.sort_by_key(|e| (e.iter().sum::<u32>(), std::cmp::Reverse(e.clone())));
        out
    }

    /// Number of basis functions including the constant.
    pub fn len(&self, dim: usize) -> usize {
        self.exponents(dim).len() + 1
    }
}

fn ipow(v: f64, p: u32) -> f64 {
    match p {
        1 => v,
        2 => v * v,
        _ => (0..p).fold(1.0, |acc, _| acc * v),
    }
}

/// Monomials stored as concatenated `(variable, power)` factors.
#[derive(Debug, Clone, PartialEq, Default)]
struct Monomials {
    factors: Vec<(usize, u32)>,
    offsets: Vec<usize>,
}

impl Monomials {
    fn new(exponents: &[Vec<u32>]) -> Self {
        let mut factors = Vec::new();
        let mut offsets = vec![0];
        for e in exponents {
            factors.extend(e.iter().enumerate().filter(|(_, p)| **p > 0).map(|(j, p)| (j, *p)));
            offsets.push(factors.len());
        }
        Self { factors, offsets }
    }

    fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    fn eval(&self, x: &[f64], j: usize) -> f64 {
        self.factors[self.offsets[j]..self.offsets[j + 1]].iter().fold(1.0, |acc, (v, p)| acc * ipow(x[*v], *p))
    }
}

/// Conditional-expectation estimate `x -> E[target | X = x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    exponents: Vec<Vec<u32>>,
    monomials: Monomials,
    centers: Vec<f64>,
    scales: Vec<f64>,
    outputs: usize,
    /// Row-major `(1 + kept features) x outputs`; row 0 is the intercept.
    coef: Vec<f64>,
    /// Mean squared residual per output, averaged over outputs.
    pub residual: f64,
    /// The normal equations were singular and a ridge term was added.
    pub ridge: bool,
}

/// Chunk size for the deterministic parallel reduction of the normal
/// equations.
const CHUNK: usize = 2048;

/// Least-squares fit of `targets` (row-major `n x outputs`) on the basis
/// evaluated at `states` (row-major `n x dim`).
pub fn fit(basis: &RegressionBasis, dim: usize, states: &[f64], targets: &[f64], outputs: usize) -> Result<Fit> {
    if dim == 0 || outputs == 0 {
        return Err(Error::InvalidParameter("regression needs positive dimensions".into()));
    }
    let n = states.len() / dim;
    if n == 0 || states.len() != n * dim {
        return Err(Error::ShapeMismatch(format!("{} state values for dimension {dim}", states.len())));
    }
    if targets.len() != n * outputs {
        return Err(Error::ShapeMismatch(format!("{} targets for {n} samples x {outputs}", targets.len())));
    }
    let all = basis.exponents(dim);
    let all_monomials = Monomials::new(&all);
    let raw = all.len();

    // standardize features; drop (near-)constant columns such as X_0
    let mut sum = vec![0.0; raw];
    for x in states.chunks_exact(dim) {
        for (j, s) in sum.iter_mut().enumerate() {
            *s += all_monomials.eval(x, j);
        }
    }
    let means: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let mut sq = vec![0.0; raw];
    for x in states.chunks_exact(dim) {
        for (j, s) in sq.iter_mut().enumerate() {
            let d = all_monomials.eval(x, j) - means[j];
            *s += d * d;
        }
    }
    let mut exponents = Vec::new();
    let mut centers = Vec::new();
    let mut scales = Vec::new();
    for j in 0..raw {
        let sd = (sq[j] / n as f64).sqrt();
        if sd.is_finite() && sd > 1e-12 * (1.0 + means[j].abs()) {
            exponents.push(all[j].clone());
            centers.push(means[j]);
            scales.push(sd);
        }
    }
    let monomials = Monomials::new(&exponents);
    let p = exponents.len() + 1;

    let features = |x: &[f64], out: &mut [f64]| {
        out[0] = 1.0;
        for j in 0..p - 1 {
            out[j + 1] = (monomials.eval(x, j) - centers[j]) / scales[j];
        }
    };

    let partials: Vec<(Vec<f64>, Vec<f64>)> = states
        .par_chunks(CHUNK * dim)
        .zip(targets.par_chunks(CHUNK * outputs))
        .map(|(xs, ys)| {
            let mut g = vec![0.0; p * p];
            let mut b = vec![0.0; p * outputs];
            let mut phi = vec![0.0; p];
            for (x, y) in xs.chunks_exact(dim).zip(ys.chunks_exact(outputs)) {
                features(x, &mut phi);
                for a in 0..p {
                    let pa = phi[a];
                    for (gc, pc) in g[a * p + a..(a + 1) * p].iter_mut().zip(&phi[a..]) {
                        *gc += pa * pc;
                    }
                    for (bo, yo) in b[a * outputs..(a + 1) * outputs].iter_mut().zip(y) {
                        *bo += pa * yo;
                    }
                }
            }
            (g, b)
        })
        .collect();
    let mut g = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DMatrix::<f64>::zeros(p, outputs);
    for (pg, pb) in &partials {
        for a in 0..p {
            for c in a..p {
                g[(a, c)] += pg[a * p + c];
            }
            for o in 0..outputs {
                rhs[(a, o)] += pb[a * outputs + o];
            }
        }
    }
    for a in 0..p {
        for c in 0..a {
            g[(a, c)] = g[(c, a)];
        }
    }
    if g.iter().chain(rhs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression design".into()));
    }

    let mut ridge = false;
    let coef = match g.clone().cholesky() {
        Some(ch) if well_conditioned(&ch.l()) => ch.solve(&rhs),
        _ => {
            ridge = true;
            let lambda = 1e-10 * g.trace() / p as f64 + f64::MIN_POSITIVE;
            let mut gr = g.clone();
            for a in 0..p {
                gr[(a, a)] += lambda.max(1e-14);
            }
            gr.cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("ridge-regularized design".into()))?
                .solve(&rhs)
        }
    };
    let coef = (0..p).flat_map(|a| (0..outputs).map(move |o| (a, o))).map(|(a, o)| coef[(a, o)]).collect();

    let mut fit = Fit { exponents, monomials, centers, scales, outputs, coef, residual: 0.0, ridge };
    let mut pred = vec![0.0; outputs];
    let mut rss = 0.0;
    for (x, y) in states.chunks_exact(dim).zip(targets.chunks_exact(outputs)) {
        fit.eval(x, &mut pred);
        rss += y.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    fit.residual = rss / (n * outputs) as f64;
    Ok(fit)
}

fn well_conditioned(l: &DMatrix<f64>) -> bool {
    let d: Vec<f64> = l.diagonal().iter().map(|v| v.abs()).collect();
    let max = d.iter().cloned().fold(0.0, f64::max);
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    max > 0.0 && min > 1e-7 * max
}

impl Fit {
    /// Fit that returns the same value everywhere.
    pub fn constant(value: &[f64]) -> Self {
        Fit {
            exponents: Vec::new(),
            monomials: Monomials::new(&[]),
            centers: Vec::new(),
            scales: Vec::new(),
            outputs: value.len(),
            coef: value.to_vec(),
            residual: 0.0,
            ridge: false,
        }
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Number of basis functions kept, including the intercept.
    pub fn features(&self) -> usize {
        self.monomials.len() + 1
    }

    /// Evaluates the fitted map at `x`, writing `outputs()` values.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let q = self.outputs;
        out.copy_from_slice(&self.coef[..q]);
        for j in 0..self.monomials.len() {
            let phi = (self.monomials.eval(x, j) - self.centers[j]) / self.scales[j];
            for (v, c) in out.iter_mut().zip(&self.coef[(j + 1) * q..(j + 2) * q]) {
                *v += phi * c;
            }
        }
    }

    /// The fit as `c + L x` in original coordinates, for degree-1 bases.
    pub fn affine_part(&self, dim: usize) -> Option<(DVector<f64>, DMatrix<f64>)> {
        if self.exponents.iter().any(|e| e.iter().sum::<u32>() != 1) {
            return None;
        }
        let q = self.outputs;
        let mut c = DVector::from_column_slice(&self.coef[..q]);
        let mut l = DMatrix::zeros(q, dim);
        for (j, e) in self.exponents.iter().enumerate() {
            let var = e.iter().position(|p| *p == 1).unwrap_or(0);
            for o in 0..q {
                let slope = self.coef[(j + 1) * q + o] / self.scales[j];
                l[(o, var)] += slope;
                c[o] -= slope * self.centers[j];
            }
        }
        Some((c, l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_sets() {
        assert_eq!(RegressionBasis::new(0, false).len(2), 1);
        assert_eq!(RegressionBasis::new(1, false).len(3), 4);
        assert_eq!(RegressionBasis::new(2, false).len(2), 5);
        assert_eq!(RegressionBasis::new(2, true).len(2), 6);
        assert_eq!(RegressionBasis::new(3, true).len(2), 10);
    }

    #[test]
    fn recovers_affine_map_exactly() {
        let states: Vec<f64> = (0..200).flat_map(|i| [(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
        let targets: Vec<f64> = states.chunks(2).map(|x| 1.5 - 2.0 * x[0] + 0.25 * x[1]).collect();
        let f = fit(&RegressionBasis::default(), 2, &states, &targets, 1).unwrap();
        assert!(f.residual < 1e-24);
        assert!(!f.ridge);
        let mut out = [0.0];
        f.eval(&[0.3, -0.7], &mut out);
        assert!((out[0] - (1.5 - 0.6 - 0.175)).abs() < 1e-12);
        let (c, l) = f.affine_part(2).unwrap();
        assert!((c[0] - 1.5).abs() < 1e-12);
        assert!((l[(0, 0)] + 2.0).abs() < 1e-12 && (l[(0, 1)] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn quadratic_with_cross_terms() {
        let states: Vec<f64> = (0..300).flat_map(|i| [(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()]).collect();
        let targets: Vec<f64> = states.chunks(2).map(|x| x[0] * x[1] + x[0] * x[0]).collect();
        let f = fit(&RegressionBasis::new(2, true), 2, &states, &targets, 1).unwrap();
        assert!(f.residual < 1e-20);
        let f = fit(&RegressionBasis::new(2, false), 2, &states, &targets, 1).unwrap();
        assert!(f.residual > 1e-4);
    }

    #[test]
    fn constant_state_drops_features() {
        let states = vec![1.0; 50];
        let targets: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let f = fit(&RegressionBasis::new(2, false), 1, &states, &targets, 1).unwrap();
        assert_eq!(f.features(), 1);
        let mut out = [0.0];
        f.eval(&[7.0], &mut out);
        assert!((out[0] - 24.5).abs() < 1e-12);
    }

    #[test]
    fn collinear_features_fall_back_to_ridge() {
        // second component is an exact multiple of the first
        let states: Vec<f64> = (0..100).flat_map(|i| [i as f64, 2.0 * i as f64]).collect();
        let targets: Vec<f64> = (0..100).map(|i| 3.0 * i as f64).collect();
        let f = fit(&RegressionBasis::default(), 2, &states, &targets, 1).unwrap();
        assert!(f.ridge);
        assert!(f.residual < 1e-6);
    }

    #[test]
    fn multi_output_and_shape_errors() {
        let states: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
        let targets: Vec<f64> = states.iter().flat_map(|x| [x + 1.0, -x]).collect();
        let f = fit(&RegressionBasis::default(), 1, &states, &targets, 2).unwrap();
        let mut out = [0.0; 2];
        f.eval(&[0.5], &mut out);
        assert!((out[0] - 1.5).abs() < 1e-12 && (out[1] + 0.5).abs() < 1e-12);
        assert!(fit(&RegressionBasis::default(), 1, &states, &targets[..10], 2).is_err());
        assert!(fit(&RegressionBasis::default(), 3, &states[..4], &targets[..1], 1).is_err());
    }

    #[test]
    fn parallel_reduction_is_deterministic() {
        let n = 10_000;
        let states: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
        let targets: Vec<f64> = states.iter().map(|x| x.sin()).collect();
        let a = fit(&RegressionBasis::new(3, false), 1, &states, &targets, 1).unwrap();
        let b = fit(&RegressionBasis::new(3, false), 1, &states, &targets, 1).unwrap();
        assert_eq!(a, b);
    }
}
