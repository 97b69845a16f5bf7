//! Loss sandwich around the event-restricted loss, and the multinomial tail
//! bound against the empirical rate of prompts outside the event.
use icl_lab::features::{default_event_constant, multinomial_tail_bound};
use icl_lab::harness::{empirical_miss_rate, positive_event_constant};
use icl_lab::{loss_report, ReducedWeights, TokenDistribution};
use nalgebra::DMatrix;

fn main() -> icl_lab::Result<()> {
    let dist = TokenDistribution::imbalanced(3, 0.6)?;
    let c = positive_event_constant(&dist);
    let m = ReducedWeights::from_matrix(DMatrix::from_row_slice(3, 3, &[2.0, -1.0, -0.5, -1.0, 1.5, 0.2, -1.0, 0.0, 1.0]))?;
    let rep = loss_report(&dist, 24, &m, c)?;
    println!("c = {c:.3}, L = {:.5}, Llow = {:.5}", rep.total, rep.lower.unwrap());
    for (k, (lo, hi)) in rep.sandwich_slack(&dist).unwrap().into_iter().enumerate() {
        println!("feature {}: restricted loss {:.5}, slack below {lo:.2e}, above {hi:.2e}", k + 1, rep.restricted[k]);
    }

    for (k, n) in [(3, 512), (4, 1024)] {
        let dist = TokenDistribution::balanced(k)?;
        let c = default_event_constant(k, n);
        let rate = empirical_miss_rate(&dist, n, c, 100_000, 3);
        println!("K = {k}, N = {n}: outside the event {rate:.2e}, bound {:.3}", multinomial_tail_bound(n, k, c));
    }
    Ok(())
}
