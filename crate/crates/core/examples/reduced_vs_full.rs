//! Trains the reduced weights and the ambient key-query matrix side by side
//! and reports how far `V^T Q_t V` drifts from `M_t`.
use icl_lab::trainer::StopRule;
use icl_lab::{dual_mode_run, BasisMode, Estimator, TokenDistribution, TrainConfig};

fn main() -> icl_lab::Result<()> {
    for basis in [BasisMode::Identity, BasisMode::RandomOrthonormal] {
        let mut cfg = TrainConfig::new(TokenDistribution::balanced(3)?, 24, 1.0, 300);
        cfg.d = 6;
        cfg.basis = basis;
        cfg.estimator = Estimator::Exact;
        cfg.stop = StopRule::Never;
        let run = dual_mode_run(&cfg)?;
        println!(
            "{basis:?}: {} steps, max |reduce(Q_t) - M_t| = {:.2e}, final A_1 = {:.4}",
            run.reduced.horizon,
            run.divergence,
            run.reduced.final_weights.a(0)
        );
    }
    Ok(())
}
