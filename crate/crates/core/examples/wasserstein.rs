//! Exact W2 between two Gaussian clouds against the index-paired bound.

use mfbsde::measure::{w2_exact, w2_paired_bound, EmpiricalMeasure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn cloud(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> EmpiricalMeasure {
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..2).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    EmpiricalMeasure::new(&pts).unwrap()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    println!("{:>5} {:>10} {:>10}", "n", "exact", "paired");
    for n in [8, 32, 128, 256] {
        let a = cloud(&mut rng, n, 0.0);
        let b = cloud(&mut rng, n, 0.5);
        let exact = w2_exact(&a, &b).unwrap();
        let paired = w2_paired_bound(&a, &b).unwrap();
        println!("{n:>5} {exact:>10.4} {paired:>10.4}");
    }
    // the exact distance between the laws is |shift| sqrt(2) = 0.7071
}
