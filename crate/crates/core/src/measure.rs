//! Empirical probability measures on R^d and the 2-Wasserstein distance.
//!
//! A cloud of `N` points carries uniform mass `1/N`. Two clouds of equal
//! cardinality are compared either exactly (optimal assignment) or through
//! the index-paired coupling, which upper-bounds the exact distance whenever
//! point `i` of both clouds belongs to the same sample path.

use crate::error::{Error, Result};

/// Largest cloud accepted by [`w2_exact`] in more than one dimension.
pub const DEFAULT_ASSIGNMENT_CAP: usize = 512;

/// Uniform-weight particle cloud standing in for a marginal law.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    data: Vec<f64>,
    mean: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(points: &[Vec<f64>]) -> Result<Self> {
        let first = points.first().ok_or(Error::EmptyCloud)?;
        let dim = first.len();
        let mut data = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
            }
            data.extend_from_slice(p);
        }
        Self::from_flat(dim, data)
    }

    /// Builds a cloud from row-major point data (`len = N * dim`).
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("measure dimension must be positive".into()));
        }
        if data.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch(format!(
                "{} coordinates do not split into points of dimension {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("empirical measure".into()));
        }
        let n = data.len() / dim;
        let mut mean = vec![0.0; dim];
        for p in data.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        Ok(Self { dim, data, mean })
    }

    /// `n` copies of a single point.
    pub fn point_mass(point: &[f64], n: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(point.len() * n);
        for _ in 0..n {
            data.extend_from_slice(point);
        }
        Self::from_flat(point.len(), data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Coordinate-wise mean, cached at construction.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Coordinate-wise (population) variance.
    pub fn variance(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut var = vec![0.0; self.dim];
        for p in self.points() {
            for ((v, x), m) in var.iter_mut().zip(p).zip(&self.mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        var
    }

    /// Restriction to a contiguous range of coordinates.
    pub fn project(&self, components: std::ops::Range<usize>) -> Result<Self> {
        if components.end > self.dim || components.is_empty() {
            return Err(Error::IndexOutOfRange { index: components.end, len: self.dim });
        }
        let mut data = Vec::with_capacity(self.len() * components.len());
        for p in self.points() {
            data.extend_from_slice(&p[components.clone()]);
        }
        Self::from_flat(components.len(), data)
    }

    /// Shifts every point by `c`.
    pub fn translate(&self, c: &[f64]) -> Result<Self> {
        if c.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: c.len() });
        }
        let data = self
            .points()
            .flat_map(|p| p.iter().zip(c).map(|(x, s)| x + s))
            .collect();
        Self::from_flat(self.dim, data)
    }
}

/// Coordinate-wise arithmetic mean of the cloud.
pub fn mean(m: &EmpiricalMeasure) -> Vec<f64> {
    m.mean().to_vec()
}

fn check_compatible(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    if a.len() != b.len() {
        return Err(Error::CardinalityMismatch { left: a.len(), right: b.len() });
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact W2 distance between equal-size uniform clouds, with the default
/// assignment cap.
pub fn w2_exact(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    w2_exact_with_cap(a, b, DEFAULT_ASSIGNMENT_CAP)
}

/// Exact W2 distance. One-dimensional clouds are matched by order statistics;
/// otherwise the squared-distance assignment problem is solved exactly for
/// clouds of at most `cap` points.
pub fn w2_exact_with_cap(a: &EmpiricalMeasure, b: &EmpiricalMeasure, cap: usize) -> Result<f64> {
    check_compatible(a, b)?;
    let n = a.len();
    if a.dim() == 1 {
        let mut xs = a.as_flat().to_vec();
        let mut ys = b.as_flat().to_vec();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let total: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - y) * (x - y)).sum();
        return Ok((total / n as f64).sqrt());
    }
    if n > cap {
        return Err(Error::AssignmentCapExceeded { n, cap });
    }
    let cost: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(a.point(i), b.point(j)))
        .collect();
    let assignment = min_cost_assignment(&cost, n);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).sqrt())
}

/// `sqrt(mean_i |a_i - b_i|^2)`: the W2 bound from the index-paired coupling.
pub fn w2_paired_bound(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    check_compatible(a, b)?;
    let total: f64 = a.points().zip(b.points()).map(|(p, q)| sq_dist(p, q)).sum();
    Ok((total / a.len() as f64).sqrt())
}

/// Minimum-cost perfect matching on a dense `n x n` row-major cost matrix
/// (Hungarian method with row/column potentials, O(n^3)). Returns the column
/// assigned to each row.
pub(crate) fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    debug_assert_eq!(cost.len(), n * n);
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is a virtual column holding the row being inserted.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
    }
    col_of
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud1(xs: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_flat(1, xs.to_vec()).unwrap()
    }

    fn brute_force_w2(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
        fn permute(k: usize, perm: &mut Vec<usize>, best: &mut f64, a: &EmpiricalMeasure, b: &EmpiricalMeasure) {
            let n = perm.len();
            if k == n {
                let c: f64 = (0..n).map(|i| sq_dist(a.point(i), b.point(perm[i]))).sum();
                *best = best.min(c);
                return;
            }
            for i in k..n {
                perm.swap(k, i);
                permute(k + 1, perm, best, a, b);
                perm.swap(k, i);
            }
        }
        let mut perm: Vec<usize> = (0..a.len()).collect();
        let mut best = f64::INFINITY;
        permute(0, &mut perm, &mut best, a, b);
        (best / a.len() as f64).sqrt()
    }

    #[test]
    fn mean_examples() {
        let m = EmpiricalMeasure::new(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(mean(&m), vec![2.0, 3.0]);
        assert_eq!(mean(&cloud1(&[5.0])), vec![5.0]);
        assert_eq!(mean(&cloud1(&[0.0, 0.0, 6.0])), vec![2.0]);
    }

    #[test]
    fn rejects_invalid_clouds() {
        assert!(matches!(EmpiricalMeasure::new(&[]), Err(Error::EmptyCloud)));
        assert!(matches!(
            EmpiricalMeasure::new(&[vec![1.0], vec![1.0, 2.0]]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(EmpiricalMeasure::from_flat(1, vec![f64::NAN]).is_err());
        assert!(EmpiricalMeasure::from_flat(0, vec![1.0]).is_err());
    }

    #[test]
    fn w2_examples() {
        let a = cloud1(&[0.0, 1.0]);
        assert_eq!(w2_exact(&a, &a).unwrap(), 0.0);
        assert_eq!(w2_exact(&cloud1(&[0.0]), &cloud1(&[3.0])).unwrap(), 3.0);
        assert_eq!(w2_exact(&a, &cloud1(&[1.0, 2.0])).unwrap(), 1.0);
    }

    #[test]
    fn paired_bound_examples() {
        let a = cloud1(&[0.0, 1.0]);
        assert_eq!(w2_paired_bound(&a, &a).unwrap(), 0.0);
        assert_eq!(w2_paired_bound(&a, &cloud1(&[1.0, 2.0])).unwrap(), 1.0);
        let crossed = cloud1(&[2.0, 1.0]);
        assert!((w2_paired_bound(&a, &crossed).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(w2_exact(&a, &crossed).unwrap(), 1.0);
    }

    #[test]
    fn errors_on_mismatch_and_cap() {
        let a = cloud1(&[0.0, 1.0]);
        assert!(matches!(w2_exact(&a, &cloud1(&[0.0])), Err(Error::CardinalityMismatch { .. })));
        let b = EmpiricalMeasure::new(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(w2_exact(&a, &b), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(w2_paired_bound(&a, &b), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(
            w2_exact_with_cap(&b, &b, 1),
            Err(Error::AssignmentCapExceeded { n: 2, cap: 1 })
        ));
    }

    #[test]
    fn assignment_handles_ties_and_identity() {
        let cost = vec![1.0, 1.0, 1.0, 1.0];
        let a = min_cost_assignment(&cost, 2);
        assert_eq!(a.len(), 2);
        assert_ne!(a[0], a[1]);
        let cost = vec![0.0, 5.0, 5.0, 5.0, 0.0, 5.0, 5.0, 5.0, 0.0];
        assert_eq!(min_cost_assignment(&cost, 3), vec![0, 1, 2]);
    }

    fn clouds(max_n: usize, max_d: usize) -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
            let coords = prop::collection::vec(-5.0f64..5.0, n * d);
            (Just(d), coords.clone(), coords.clone(), coords)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn exact_matches_brute_force_and_is_dominated((d, xa, xb, _) in clouds(7, 3)) {
            let a = EmpiricalMeasure::from_flat(d, xa).unwrap();
            let b = EmpiricalMeasure::from_flat(d, xb).unwrap();
            let exact = w2_exact(&a, &b).unwrap();
            let brute = brute_force_w2(&a, &b);
            prop_assert!((exact * exact - brute * brute).abs() < 1e-10);
            prop_assert!(exact <= w2_paired_bound(&a, &b).unwrap() + 1e-12);
        }

        #[test]
        fn metric_axioms((d, xa, xb, xc) in clouds(6, 3)) {
            let a = EmpiricalMeasure::from_flat(d, xa).unwrap();
            let b = EmpiricalMeasure::from_flat(d, xb).unwrap();
            let c = EmpiricalMeasure::from_flat(d, xc).unwrap();
            let ab = w2_exact(&a, &b).unwrap();
            prop_assert!((ab - w2_exact(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(w2_exact(&a, &a).unwrap() < 1e-12);
            let ac = w2_exact(&a, &c).unwrap();
            let cb = w2_exact(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-9);
        }

        #[test]
        fn translation_invariance((d, xa, xb, xc) in clouds(6, 3)) {
            let a = EmpiricalMeasure::from_flat(d, xa).unwrap();
            let b = EmpiricalMeasure::from_flat(d, xb).unwrap();
            let shift = &xc[..d];
            let lhs = w2_exact(&a.translate(shift).unwrap(), &b.translate(shift).unwrap()).unwrap();
            prop_assert!((lhs - w2_exact(&a, &b).unwrap()).abs() < 1e-9);
        }
    }
}
