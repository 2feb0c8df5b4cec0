//! Declared constants, the smallness condition, the contraction rate it
//! predicts, and a probe of the monotonicity condition.

use std::sync::Arc;

use mfbsde::problem::{
    check_h1, check_smallness, contraction_constants, FnCoefficients, LipschitzProfile, MfProblem,
    MonotonicityProfile, Variant, YoungParams,
};

fn main() -> mfbsde::Result<()> {
    let c = 0.1;
    let coeffs = FnCoefficients::new(
        move |_, u, law, out| out[0] = -u.y[0] + c * law.mean()[0],
        |_, _, _, out| out[0] = 1.0,
        move |_, u, law, out| out[0] = -u.x[0] + c * law.mean()[1],
        move |x, law, out| out[0] = x[0] + c * law.mean()[0],
    );
    let lip = LipschitzProfile::new(1.0, c, 1.0, c)?;
    let mono = MonotonicityProfile::new(1.0, 1.0, Variant::H1Prime)?;
    let p = MfProblem::new(1, vec![1.0], 1.0, Arc::new(coeffs))?
        .with_law_free_sigma(true)
        .with_lipschitz(lip)?
        .with_monotonicity(mono)?;

    let report = check_smallness(&lip, &mono);
    println!("smallness: bound {:.4}, pass {}", report.bound, report.pass);
    let cc = contraction_constants(&lip, &mono, YoungParams::canonical(Variant::H1Prime, 0.01))?;
    println!("lambda {:.4}, theta {:.4}, theta/lambda {:.4}", cc.lambda, cc.theta, cc.ratio().unwrap());
    let probe = check_h1(&p, 10_000, 3)?;
    println!("probed k ~ {:.4}, k' ~ {:.4}, pass {}", probe.k_estimate, probe.k_prime_estimate, probe.pass);

    let violated = LipschitzProfile::new(1.0, 0.6, 1.0, 0.0)?;
    let h1 = MonotonicityProfile::new(1.0, 1.0, Variant::H1)?;
    let r = check_smallness(&violated, &h1);
    println!("H1 with C_nu = 0.6: bound {:.4}, pass {}", r.bound, r.pass);
    Ok(())
}
