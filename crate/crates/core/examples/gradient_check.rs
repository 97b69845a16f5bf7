//! Analytic per-prompt gradient against central differences, and the
//! population gradient at `M = 0` for two balanced features and `N = 2`.
use icl_lab::features::sample_counts;
use icl_lab::gradient::{finite_diff_check, population_gradient_exact};
use icl_lab::{ReducedWeights, TokenDistribution};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> icl_lab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.gen_range(2..=6);
        let n = rng.gen_range(1..=64);
        let dist = TokenDistribution::balanced(k)?;
        let counts = sample_counts(&dist, n, &mut rng)?;
        let m = ReducedWeights::from_matrix(DMatrix::from_fn(k, k, |_, _| rng.gen_range(-2.0..2.0)))?;
        let r = finite_diff_check(&counts, rng.gen_range(0..k), &m, 1e-5)?;
        worst = worst.max(r.max_rel_err);
    }
    println!("200 random prompts: max relative error {worst:.2e}");

    let g = population_gradient_exact(&TokenDistribution::balanced(2)?, 2, &ReducedWeights::zeros(2))?;
    println!("K=2, N=2, M=0: alpha = {:?}, beta_12 = {}, beta_21 = {}", g.alpha, g.beta[(0, 1)], g.beta[(1, 0)]);
    Ok(())
}
