//! The two-player game whose mean boundary problem degenerates at `T = 1`:
//! the determinant sweep, the mean equilibrium at `T = 0.5`, and a particle
//! solution at `T = 0.25` compared with the mean dynamics.

use mfbsde::fixpoint::SchemeParams;
use mfbsde::lqgame::{boundary_matrix, check_h2, example3, solve_mean_fbode, solve_nash, MeanOutcome};
use mfbsde::paths::TimeGrid;

fn main() -> mfbsde::Result<()> {
    println!("{:>5} {:>10} {:>10}", "T", "det B", "(1-T)(1+3T)");
    for j in 0..=8 {
        let t = 0.25 * j as f64;
        let (b, _) = boundary_matrix(&example3(t))?;
        println!("{t:>5.2} {:>10.6} {:>10.6}", b.determinant(), (1.0 - t) * (1.0 + 3.0 * t));
    }

    let h2 = check_h2(&example3(1.0), &TimeGrid::new(1.0, 10)?)?;
    println!("H2: eigenvalues of sum K_i Q_i {:?}, pass {}", h2.kq_eigenvalues, h2.pass);

    match solve_mean_fbode(&example3(0.5))? {
        MeanOutcome::Solution(s) => println!(
            "T = 0.5: E[X_T] = {:.6?}, controls {:.6?} {:.6?}",
            s.terminal_mean,
            s.control_at(0, 0.5),
            s.control_at(1, 0.5)
        ),
        MeanOutcome::Nonexistence(n) => println!("T = 0.5: no equilibrium, det {}", n.det),
    }
    if let MeanOutcome::Nonexistence(n) = solve_mean_fbode(&example3(1.0))? {
        println!("T = 1: no equilibrium, det {:.2e}", n.det);
    }

    let (horizon, particles, steps) = (0.25, 4000, 50);
    let game = example3(horizon);
    let grid = TimeGrid::new(horizon, steps)?;
    let params = SchemeParams { particles, delta: 0.0, tol: 1e-3, ..Default::default() };
    let nash = solve_nash(&game, &grid, &params, 5)?;
    let MeanOutcome::Solution(mean) = solve_mean_fbode(&game)? else { unreachable!() };
    let err = (0..grid.nodes())
        .map(|k| {
            let m = mean.mean_x_at(grid.time(k));
            nash.x.mean_at(k).iter().zip(&m).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let bound = 3.0 * (grid.dt() + 1.0 / (particles as f64).sqrt());
    println!("T = 0.25 particles vs mean ODE: max error {err:.4} (bound {bound:.4})");
    Ok(())
}
