//! After training, the model predicts the label of the query from the
//! prompt alone, for a task vector it never saw.
use icl_lab::trainer::StopRule;
use icl_lab::{gd_run, icl_test, BasisMode, Estimator, FeatureBasis, TokenDistribution, TrainConfig};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> icl_lab::Result<()> {
    let (k, n) = (3, 144);
    let dist = TokenDistribution::balanced(k)?;
    let mut cfg = TrainConfig::new(dist.clone(), n, 5.0, 10_000);
    cfg.estimator = Estimator::Exact;
    cfg.stop = StopRule::TotalGap;
    let rec = gd_run(&cfg)?;
    println!("trained for {} steps", rec.horizon);

    let basis = FeatureBasis::build(8, k, 11, BasisMode::RandomOrthonormal)?;
    let w = (basis.vector(0) - basis.vector(1)) * 10.0 + DVector::from_element(8, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for q in 0..k {
        let r = icl_test(&rec.final_weights, &basis, &w, q, &dist, n, 1000, &mut rng)?;
        println!(
            "query feature {}: mean |y_hat - y| = {:.4} (label spread {:.2}), max = {:.4}",
            q + 1,
            r.mean_error,
            r.scale,
            r.max_error
        );
    }
    Ok(())
}
