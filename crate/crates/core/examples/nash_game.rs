//! Open-loop equilibrium of a scalar game, checked against the Riccati
//! equation `P' = P² - 1, P(T) = 1` (so `P ≡ 1` and `p_0 = x0`) and by
//! random unilateral deviations.

use mfbsde::fixpoint::SchemeParams;
use mfbsde::lqgame::{check_h2, deviation_test, scalar_game, solve_nash};
use mfbsde::paths::TimeGrid;

fn main() -> mfbsde::Result<()> {
    let game = scalar_game(1, 0.0, 0.3, 1.0, 1.0);
    let grid = TimeGrid::new(1.0, 100)?;
    let h2 = check_h2(&game, &grid)?;
    println!("H2 pass: {} (eta1 = {:?}, eta2 = {:?})", h2.pass, h2.eta1, h2.eta2);

    let params = SchemeParams { particles: 10_000, delta: 0.0, tol: 1e-4, ..Default::default() };
    let nash = solve_nash(&game, &grid, &params, 11)?;
    let s = nash.summary();
    println!("converged after {} outer steps", s.outer_iterations);
    println!("p_0 = {:.4} (Riccati: 1.0000)", s.p0[0][0]);
    println!("J = {:.4} ± {:.4}", s.costs[0].value, s.costs[0].stderr);

    let ok = deviation_test(&game, &nash, 0, 20, 0.1, 12)?;
    println!("deviations at the equilibrium: min delta {:.2e}, pass {}", ok.min_delta, ok.pass);
    let bad = deviation_test(&game, &nash.with_shifted_control(0, 0.5), 0, 20, 0.1, 12)?;
    println!("deviations from a shifted control: min delta {:.2e}, pass {}", bad.min_delta, bad.pass);
    Ok(())
}
