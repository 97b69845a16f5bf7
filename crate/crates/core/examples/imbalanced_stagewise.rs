//! One dominant feature: when each feature's conditional loss gap closes, and
//! the detected phase boundaries.
use icl_lab::harness::detect_phases;
use icl_lab::trainer::StopRule;
use icl_lab::{gd_run, Estimator, PhaseThresholds, Regime, TokenDistribution, TrainConfig};

fn main() -> icl_lab::Result<()> {
    let dist = TokenDistribution::new(vec![0.55, 0.15, 0.15, 0.15], Regime::Imbalanced)?;
    let mut cfg = TrainConfig::new(dist.clone(), 512, 5.0, 10_000);
    cfg.record_every = 1;
    cfg.estimator = Estimator::Truncated { min_prob: 1e-16 };
    cfg.stop = StopRule::ConditionalGap;
    let rec = gd_run(&cfg)?;

    for k in 0..4 {
        let closed = rec.snapshots.iter().find(|s| s.loss.conditional_gaps()[k] <= cfg.epsilon).map(|s| s.t);
        println!("feature {}: conditional gap <= {} at t = {closed:?}", k + 1, cfg.epsilon);
    }
    let log_k = 4f64.ln();
    for s in rec.snapshots.iter().take(12) {
        println!(
            "t = {:>2}  A_2/log K = {:+.3}  B_21/log K = {:+.3}  A_1/log K = {:+.3}",
            s.t,
            s.weights.a(1) / log_k,
            s.weights.b(1, 0) / log_k,
            s.weights.a(0) / log_k
        );
    }

    let th = PhaseThresholds { c: Some(0.3), ..Default::default() };
    let phases = detect_phases(&rec, &dist, &th)?;
    for f in &phases.features {
        let show: Vec<String> = f
            .boundaries
            .iter()
            .map(|b| format!("{} = {:?}{}", b.name, b.t, if b.completed { "" } else { " (open)" }))
            .collect();
        println!("feature {}: {}", f.feature, show.join(", "));
    }
    Ok(())
}
