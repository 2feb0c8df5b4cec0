//! Time grids, reproducible Brownian increments and per-particle path storage.

use std::io::Write;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;

/// Uniform grid `0 = t_0 < ... < t_N = T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::InvalidParameter("grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, node: usize) -> f64 {
        if node == self.steps {
            self.horizon
        } else {
            node as f64 * self.dt()
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.nodes()).map(|k| self.time(k))
    }
}

/// Brownian increments `[particle][step][component]`, each `N(0, dt)`.
///
/// Particle `i` draws from ChaCha stream `i` of the seed, so the bundle does
/// not depend on how generation is scheduled across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBundle {
    seed: u64,
    particles: usize,
    steps: usize,
    dim: usize,
    dt: f64,
    increments: Vec<f64>,
}

impl BrownianBundle {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn increment(&self, particle: usize, step: usize) -> &[f64] {
        let start = (particle * self.steps + step) * self.dim;
        &self.increments[start..start + self.dim]
    }

    /// `W_{t_node}` for one particle.
    pub fn position(&self, particle: usize, node: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.dim];
        for step in 0..node {
            for (acc, dw) in w.iter_mut().zip(self.increment(particle, step)) {
                *acc += dw;
            }
        }
        w
    }
}

pub fn make_bundle(grid: &TimeGrid, particles: usize, dim: usize, seed: u64) -> Result<BrownianBundle> {
    if particles == 0 || dim == 0 {
        return Err(Error::InvalidParameter("bundle needs positive particle count and dimension".into()));
    }
    let steps = grid.steps();
    let dt = grid.dt();
    let scale = dt.sqrt();
    let mut increments = vec![0.0; particles * steps * dim];
    increments
        .par_chunks_mut(steps * dim)
        .enumerate()
        .for_each(|(particle, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(particle as u64);
            for v in chunk.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = scale * z;
            }
        });
    Ok(BrownianBundle { seed, particles, steps, dim, dt, increments })
}

/// Values of a process for every particle at every node (or step, for `Z`).
///
/// Storage is node-major so that the cross-section at one time is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    particles: usize,
    nodes: usize,
    dim: usize,
    values: Vec<f64>,
}

impl PathEnsemble {
    pub fn zeros(particles: usize, nodes: usize, dim: usize) -> Self {
        Self { particles, nodes, dim, values: vec![0.0; particles * nodes * dim] }
    }

    pub fn constant(particles: usize, nodes: usize, value: &[f64]) -> Self {
        let dim = value.len();
        let mut values = Vec::with_capacity(particles * nodes * dim);
        for _ in 0..particles * nodes {
            values.extend_from_slice(value);
        }
        Self { particles, nodes, dim, values }
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, particle: usize, node: usize) -> &[f64] {
        let start = (node * self.particles + particle) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn get_mut(&mut self, particle: usize, node: usize) -> &mut [f64] {
        let start = (node * self.particles + particle) * self.dim;
        &mut self.values[start..start + self.dim]
    }

    /// All particles at one node, row-major `[particle][component]`.
    pub fn slice(&self, node: usize) -> &[f64] {
        let width = self.particles * self.dim;
        &self.values[node * width..(node + 1) * width]
    }

    pub fn slice_mut(&mut self, node: usize) -> &mut [f64] {
        let width = self.particles * self.dim;
        &mut self.values[node * width..(node + 1) * width]
    }

    /// Node `node` for reading and node `node + 1` for writing.
    pub(crate) fn split_step(&mut self, node: usize) -> (&[f64], &mut [f64]) {
        let width = self.particles * self.dim;
        let (head, tail) = self.values.split_at_mut((node + 1) * width);
        (&head[node * width..], &mut tail[..width])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &PathEnsemble) -> bool {
        self.particles == other.particles && self.nodes == other.nodes && self.dim == other.dim
    }

    pub fn mean_at(&self, node: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in self.slice(node).chunks_exact(self.dim) {
            for (a, v) in m.iter_mut().zip(p) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= self.particles as f64);
        m
    }

    pub fn variance_at(&self, node: usize) -> Vec<f64> {
        let m = self.mean_at(node);
        let mut var = vec![0.0; self.dim];
        for p in self.slice(node).chunks_exact(self.dim) {
            for ((a, v), mu) in var.iter_mut().zip(p).zip(&m) {
                *a += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|a| *a /= self.particles as f64);
        var
    }

    /// `mean_i |self_i - other_i|^2` at one node.
    pub fn mean_sq_diff_at(&self, other: &PathEnsemble, node: usize) -> f64 {
        let total: f64 = self
            .slice(node)
            .iter()
            .zip(other.slice(node))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total / self.particles as f64
    }

    /// Writes `time,particle,component_0,...` rows. Ensembles with one node
    /// fewer than the grid (`Z` on steps) are stamped with left endpoints.
    pub fn write_csv<W: Write>(&self, grid: &TimeGrid, mut out: W) -> Result<()> {
        write!(out, "time,particle")?;
        for c in 0..self.dim {
            write!(out, ",component_{c}")?;
        }
        writeln!(out)?;
        for node in 0..self.nodes {
            let t = grid.time(node);
            for particle in 0..self.particles {
                write!(out, "{t},{particle}")?;
                for v in self.get(particle, node) {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Cloud of the selected components at `node`, one point per particle.
pub fn marginal(e: &PathEnsemble, node: usize, components: Range<usize>) -> Result<EmpiricalMeasure> {
    if node >= e.nodes() {
        return Err(Error::IndexOutOfRange { index: node, len: e.nodes() });
    }
    if components.is_empty() || components.end > e.dim() {
        return Err(Error::IndexOutOfRange { index: components.end, len: e.dim() });
    }
    let mut data = Vec::with_capacity(e.particles() * components.len());
    for p in e.slice(node).chunks_exact(e.dim()) {
        data.extend_from_slice(&p[components.clone()]);
    }
    EmpiricalMeasure::from_flat(components.len(), data)
}

/// Joint `(X, Y)` cloud at `node`, concatenating both components per particle.
pub fn joint_marginal(x: &PathEnsemble, y: &PathEnsemble, node: usize) -> Result<EmpiricalMeasure> {
    if x.particles() != y.particles() {
        return Err(Error::CardinalityMismatch { left: x.particles(), right: y.particles() });
    }
    if node >= x.nodes() || node >= y.nodes() {
        return Err(Error::IndexOutOfRange { index: node, len: x.nodes().min(y.nodes()) });
    }
    let mut data = Vec::with_capacity(x.particles() * (x.dim() + y.dim()));
    for (px, py) in x.slice(node).chunks_exact(x.dim()).zip(y.slice(node).chunks_exact(y.dim())) {
        data.extend_from_slice(px);
        data.extend_from_slice(py);
    }
    EmpiricalMeasure::from_flat(x.dim() + y.dim(), data)
}

/// Writes `time,mean_0,...,var_0,...` with the components of all ensembles
/// concatenated in order. All ensembles must share the grid's node count.
pub fn write_moments_csv<W: Write>(grid: &TimeGrid, ensembles: &[&PathEnsemble], mut out: W) -> Result<()> {
    if ensembles.iter().any(|e| e.nodes() != grid.nodes()) {
        return Err(Error::ShapeMismatch("moment export needs node-valued ensembles".into()));
    }
    let width: usize = ensembles.iter().map(|e| e.dim()).sum();
    write!(out, "time")?;
    for c in 0..width {
        write!(out, ",mean_{c}")?;
    }
    for c in 0..width {
        write!(out, ",var_{c}")?;
    }
    writeln!(out)?;
    for node in 0..grid.nodes() {
        write!(out, "{}", grid.time(node))?;
        let means: Vec<f64> = ensembles.iter().flat_map(|e| e.mean_at(node)).collect();
        let vars: Vec<f64> = ensembles.iter().flat_map(|e| e.variance_at(node)).collect();
        for v in means.iter().chain(&vars) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
