//! Balanced features: phase boundaries, the loss gap at the stop, and
//! attention concentration on typical prompts.
use icl_lab::features::default_event_constant;
use icl_lab::harness::detect_phases;
use icl_lab::{attention_concentration, gd_run, Estimator, PhaseThresholds, TokenDistribution, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> icl_lab::Result<()> {
    let (k, n) = (4, 256);
    let dist = TokenDistribution::balanced(k)?;
    let mut cfg = TrainConfig::new(dist.clone(), n, 5.0, 100_000);
    cfg.estimator = Estimator::Exact;
    cfg.budget = 3_000_000;
    cfg.record_every = 1;
    let rec = gd_run(&cfg)?;
    println!("stopped at t = {:?}, L - Llow = {:.4e}", rec.stopped_at, rec.last().gap);

    for s in rec.snapshots.iter().step_by(5) {
        println!("t = {:>3}  A = {:.4}  B = {:.4}  gap = {:.4e}", s.t, s.weights.a(0), s.weights.b(0, 1), s.gap);
    }

    let phases = detect_phases(&rec, &dist, &PhaseThresholds::default())?;
    for f in &phases.features {
        let show: Vec<String> = f.boundaries.iter().map(|b| format!("{} = {:?}", b.name, b.t)).collect();
        println!("feature {}: {}", f.feature, show.join(", "));
    }

    let c = default_event_constant(k, n);
    let conc = attention_concentration(&rec.final_weights, &dist, n, cfg.epsilon, 3.0, c, 10_000, &mut ChaCha8Rng::seed_from_u64(1))?;
    println!(
        "(1 - Attn_k)^2 <= 3 eps on {:.2}% of event prompts, min Attn_k = {:.4}",
        100.0 * conc.min_pass_rate(),
        conc.min_attn()
    );
    Ok(())
}
