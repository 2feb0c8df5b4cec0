//! Least-squares Monte Carlo on two decoupled BSDEs along X = x0 + W:
//! `g(x) = x` (so Y = X, Z = 1) and the linear driver `h = -a y`,
//! `g = 1` (so Y_0 = e^{aT}).

use std::sync::Arc;

use mfbsde::backward::solve_backward;
use mfbsde::forward::propagate;
use mfbsde::measure::EmpiricalMeasure;
use mfbsde::paths::{make_bundle, marginal, PathEnsemble, TimeGrid};
use mfbsde::problem::{FnCoefficients, MfProblem, State};
use mfbsde::regression::RegressionBasis;

fn brownian(
    x0: f64,
    driver: impl Fn(f64, State<'_>, &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static,
    terminal: impl Fn(&[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static,
) -> MfProblem {
    let c = FnCoefficients::new(|_, _, _, _| {}, |_, _, _, out| out[0] = 1.0, driver, terminal);
    MfProblem::new(1, vec![x0], 1.0, Arc::new(c)).unwrap().with_law_free_sigma(true)
}

fn main() -> mfbsde::Result<()> {
    let (n, steps) = (10_000, 100);
    let grid = TimeGrid::new(1.0, steps)?;
    let bundle = make_bundle(&grid, n, 1, 42)?;
    // coefficients here ignore the law, so any cloud of the right shape will do
    let flow: Vec<_> = (0..grid.nodes()).map(|_| EmpiricalMeasure::point_mass(&[0.0, 0.0], n)).collect::<Result<_, _>>()?;
    let zero = PathEnsemble::zeros(n, grid.nodes(), 1);
    let basis = RegressionBasis::default();

    let p = brownian(0.4, |_, _, _, _| {}, |x, _, out| out[0] = x[0]);
    let x = propagate(&p, &grid, &bundle, &zero, &zero, &zero, &zero, &flow, 0.0)?;
    let law = marginal(&x, steps, 0..1)?;
    let out = solve_backward(&p, &grid, &bundle, &x, &flow, &law, &basis, 2)?;
    println!("martingale: Y_0 = {:.5} (x0 = 0.4), Z_0 = {:.5} (1)", out.y.mean_at(0)[0], out.z.mean_at(0)[0]);

    let a = 0.5;
    let p = brownian(0.0, move |_, u, _, out| out[0] = -a * u.y[0], |_, _, out| out[0] = 1.0);
    let out = solve_backward(&p, &grid, &bundle, &x, &flow, &law, &basis, 3)?;
    println!("linear driver: Y_0 = {:.5} (e^0.5 = {:.5})", out.y.mean_at(0)[0], a.exp());
    Ok(())
}
