//! Measure-freezing outer iteration on a coupled linear problem
//!
//! ```text
//! dX = (-Y + 0.1 E[X]) dt + dW,   dY = -(-X + 0.1 E[Y]) dt + Z dW,   Y_T = X_T + 0.1 E[X_T]
//! ```
//!
//! printing the Cauchy gaps against the predicted rate.

use std::sync::Arc;

use mfbsde::fixpoint::{residual, solve, SchemeParams};
use mfbsde::paths::{write_moments_csv, TimeGrid};
use mfbsde::problem::{FnCoefficients, LipschitzProfile, MfProblem, MonotonicityProfile, Variant};

fn main() -> mfbsde::Result<()> {
    let c = 0.1;
    let coeffs = FnCoefficients::new(
        move |_, u, law, out| out[0] = -u.y[0] + c * law.mean()[0],
        |_, _, _, out| out[0] = 1.0,
        move |_, u, law, out| out[0] = -u.x[0] + c * law.mean()[1],
        move |x, law, out| out[0] = x[0] + c * law.mean()[0],
    );
    let p = MfProblem::new(1, vec![1.0], 1.0, Arc::new(coeffs))?
        .with_law_free_sigma(true)
        .with_lipschitz(LipschitzProfile::new(1.0, c, 1.0, c)?)?
        .with_monotonicity(MonotonicityProfile::new(1.0, 1.0, Variant::H1Prime)?)?;
    let grid = TimeGrid::new(1.0, 100)?;
    let params = SchemeParams { particles: 5000, delta: 0.01, tol: 1e-4, ..Default::default() };
    let sol = solve(&p, &grid, &params, 7)?;

    println!("{:>3} {:>12} {:>12} {:>8} {:>8}", "n", "gap_XT", "gap_U", "ratio", "theory");
    for r in &sol.diagnostics.history {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("{:>3} {:>12.3e} {:>12.3e} {:>8} {:>8}", r.n, r.gap_xt, r.gap_u, f(r.ratio), f(r.theory_ratio));
    }
    println!("converged: {}", sol.converged());
    println!("residuals: {:?}", residual(&p, &sol));
    println!("Y_0 = {:.4}", sol.y.mean_at(0)[0]);

    let mut csv = Vec::new();
    write_moments_csv(&grid, &[&sol.x, &sol.y], &mut csv)?;
    let text = String::from_utf8(csv).unwrap();
    for line in text.lines().step_by(25) {
        println!("{line}");
    }
    Ok(())
}
