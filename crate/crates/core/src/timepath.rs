//! Matrix-valued deterministic coefficient paths `t -> M(t)`.

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// One piece of a piecewise-constant path, active from `t_from` onwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub t_from: f64,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Clone)]
pub enum TimePath {
    Const(DMatrix<f64>),
    /// Pieces sorted by start time; the first starts at 0.
    Piecewise(Vec<(f64, DMatrix<f64>)>),
    /// Deterministic time dependence supplied programmatically.
    Func { rows: usize, cols: usize, f: Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync> },
}

impl fmt::Debug for TimePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimePath::Const(m) => f.debug_tuple("Const").field(m).finish(),
            TimePath::Piecewise(p) => f.debug_tuple("Piecewise").field(p).finish(),
            TimePath::Func { rows, cols, .. } => write!(f, "Func({rows}x{cols})"),
        }
    }
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(Error::Config("matrix must be non-empty".into()));
    }
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config("ragged matrix rows".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Config("matrix entries must be finite".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

impl TimePath {
    pub fn constant(m: DMatrix<f64>) -> Self {
        TimePath::Const(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        TimePath::Const(DMatrix::zeros(rows, cols))
    }

    pub fn column(v: &[f64]) -> Self {
        TimePath::Const(DMatrix::from_column_slice(v.len(), 1, v))
    }

    pub fn piecewise(mut pieces: Vec<(f64, DMatrix<f64>)>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::Config("piecewise path needs at least one piece".into()));
        }
        pieces.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pieces[0].0 > 0.0 {
            return Err(Error::Config("first piece must start at t = 0".into()));
        }
        let shape = pieces[0].1.shape();
        if pieces.iter().any(|(_, m)| m.shape() != shape) {
            return Err(Error::Config("pieces have inconsistent shapes".into()));
        }
        Ok(TimePath::Piecewise(pieces))
    }

    pub fn func<F>(rows: usize, cols: usize, f: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        TimePath::Func { rows, cols, f: Arc::new(f) }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            TimePath::Const(m) => m.shape(),
            TimePath::Piecewise(p) => p[0].1.shape(),
            TimePath::Func { rows, cols, .. } => (*rows, *cols),
        }
    }

    pub fn at(&self, t: f64) -> Cow<'_, DMatrix<f64>> {
        match self {
            TimePath::Const(m) => Cow::Borrowed(m),
            TimePath::Piecewise(p) => {
                let idx = p.partition_point(|(start, _)| *start <= t).saturating_sub(1);
                Cow::Borrowed(&p[idx].1)
            }
            TimePath::Func { f, .. } => Cow::Owned(f(t)),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, TimePath::Const(_))
    }

    /// Times at which the path is evaluated for sup-over-time checks: the
    /// supplied grid plus every piece start.
    pub fn sample_times(&self, grid: impl Iterator<Item = f64>) -> Vec<f64> {
        let mut ts: Vec<f64> = grid.collect();
        if let TimePath::Piecewise(p) = self {
            ts.extend(p.iter().map(|(s, _)| *s));
        }
        ts
    }

    pub fn is_zero(&self) -> bool {
        match self {
            TimePath::Const(m) => m.iter().all(|v| *v == 0.0),
            TimePath::Piecewise(p) => p.iter().all(|(_, m)| m.iter().all(|v| *v == 0.0)),
            TimePath::Func { .. } => false,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum TimePathRepr {
    Const(Vec<Vec<f64>>),
    Piecewise(Vec<Piece>),
}

impl Serialize for TimePath {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = match self {
            TimePath::Const(m) => TimePathRepr::Const(matrix_to_rows(m)),
            TimePath::Piecewise(p) => TimePathRepr::Piecewise(
                p.iter().map(|(t, m)| Piece { t_from: *t, matrix: matrix_to_rows(m) }).collect(),
            ),
            TimePath::Func { .. } => {
                return Err(serde::ser::Error::custom("callback coefficients cannot be serialized"))
            }
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TimePath {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        match TimePathRepr::deserialize(d)? {
            TimePathRepr::Const(rows) => matrix_from_rows(&rows).map(TimePath::Const).map_err(D::Error::custom),
            TimePathRepr::Piecewise(pieces) => {
                let pieces = pieces
                    .iter()
                    .map(|p| matrix_from_rows(&p.matrix).map(|m| (p.t_from, m)))
                    .collect::<Result<Vec<_>>>()
                    .map_err(D::Error::custom)?;
                TimePath::piecewise(pieces).map_err(D::Error::custom)
            }
        }
    }
}

/// `out += m * v`.
pub(crate) fn gemv_add(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.ncols(), v.len());
    debug_assert_eq!(m.nrows(), out.len());
    for (j, vj) in v.iter().enumerate() {
        if *vj == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += m[(i, j)] * vj;
        }
    }
}

/// `out += m^T * v`.
pub(crate) fn gemv_t_add(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.nrows(), v.len());
    debug_assert_eq!(m.ncols(), out.len());
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, vi) in v.iter().enumerate() {
            acc += m[(i, j)] * vi;
        }
        *o += acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_lookup() {
        let p = TimePath::piecewise(vec![
            (0.5, DMatrix::from_element(1, 1, 2.0)),
            (0.0, DMatrix::from_element(1, 1, 1.0)),
        ])
        .unwrap();
        assert_eq!(p.at(0.0)[(0, 0)], 1.0);
        assert_eq!(p.at(0.49)[(0, 0)], 1.0);
        assert_eq!(p.at(0.5)[(0, 0)], 2.0);
        assert_eq!(p.at(3.0)[(0, 0)], 2.0);
    }

    #[test]
    fn json_forms() {
        let c: TimePath = serde_json::from_str(r#"{"const": [[1, 2], [3, 4]]}"#).unwrap();
        assert_eq!(c.at(0.3)[(1, 0)], 3.0);
        let p: TimePath =
            serde_json::from_str(r#"{"piecewise": [{"t_from": 0, "matrix": [[1]]}, {"t_from": 1, "matrix": [[5]]}]}"#)
                .unwrap();
        assert_eq!(p.at(1.5)[(0, 0)], 5.0);
        let back = serde_json::to_string(&p).unwrap();
        let again: TimePath = serde_json::from_str(&back).unwrap();
        assert_eq!(again.at(1.5)[(0, 0)], 5.0);
        assert!(serde_json::from_str::<TimePath>(r#"{"const": [[1, 2], [3]]}"#).is_err());
        assert!(serde_json::from_str::<TimePath>(r#"{"piecewise": [{"t_from": 0.5, "matrix": [[1]]}]}"#).is_err());
    }

    #[test]
    fn gemv_helpers() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut out = vec![1.0, 1.0];
        gemv_add(&m, &[1.0, 0.0, -1.0], &mut out);
        assert_eq!(out, vec![-1.0, -1.0]);
        let mut out = vec![0.0; 3];
        gemv_t_add(&m, &[1.0, 1.0], &mut out);
        assert_eq!(out, vec![5.0, 7.0, 9.0]);
    }
}
