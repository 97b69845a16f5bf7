//! Exact enumeration against the Monte Carlo estimator and its standard errors.
use icl_lab::{Estimator, Evaluator, ReducedWeights, TokenDistribution};
use nalgebra::DMatrix;

fn main() -> icl_lab::Result<()> {
    let dist = TokenDistribution::imbalanced(3, 0.5)?;
    let m = ReducedWeights::from_matrix(DMatrix::from_row_slice(3, 3, &[1.0, -0.5, 0.2, 0.3, 0.8, -1.0, -0.4, 0.1, 1.2]))?;
    let exact = Evaluator::new(&dist, 30, Estimator::Exact, 1_000_000, 0, 1.0)?.evaluate(&m, 0)?;
    for samples in [1_000, 10_000, 100_000] {
        let mc = Evaluator::new(&dist, 30, Estimator::MonteCarlo { samples }, 0, 9, 1.0)?.evaluate(&m, 0)?;
        let se = mc.gradient.std_err.as_ref().unwrap();
        println!("S = {samples}");
        for k in 0..3 {
            let z = (mc.gradient.alpha[k] - exact.gradient.alpha[k]) / se.alpha[k];
            println!(
                "  alpha_{}: exact {:.6}, mc {:.6} +- {:.1e} (z = {z:+.2})",
                k + 1,
                exact.gradient.alpha[k],
                mc.gradient.alpha[k],
                se.alpha[k]
            );
        }
    }
    Ok(())
}
