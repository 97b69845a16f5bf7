//! Loss functionals and their lower bounds, phase detection on recorded
//! trajectories, attention concentration and the unseen-task test.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};
use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{attention_profile, embed, forward, lift, ReducedWeights};
use crate::error::{Error, Result};
use crate::features::{
    draw_multinomial, event_constants, event_intervals, in_event, multinomial_tail_bound,
    FeatureBasis, Prompt, PromptCounts, Regime, TokenDistribution, DEFAULT_ENUMERATION_BUDGET,
};
use crate::gradient::{Estimator, EstimatorKind, Evaluation, Evaluator};
use crate::trainer::{Snapshot, TrajectoryRecord};

const TRIAL_BLOCK: usize = 512;

/// Population loss terms at one weight matrix.
///
/// `per_feature[k] = L_k = p_k E[loss | query k]`, `restricted` is the same
/// expectation restricted to the concentration event, `conditional` divides
/// by `p_k`. The lower bounds are `None` for `K = 1`, where `1/(K-1)` is
/// undefined.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub per_feature: Vec<f64>,
    pub restricted: Vec<f64>,
    pub lower: Option<f64>,
    pub lower_per_feature: Option<Vec<f64>>,
    pub conditional: Vec<f64>,
    pub conditional_restricted: Vec<f64>,
    pub conditional_lower: Option<Vec<f64>>,
    /// `min(1, 3 exp(-c^2 N / (25 K^2)))`.
    pub tail_bound: f64,
    pub c: f64,
    pub estimator: EstimatorKind,
    /// Standard errors of `per_feature` (Monte Carlo only).
    pub std_err: Option<Vec<f64>>,
}

impl LossReport {
    pub fn from_evaluation(dist: &TokenDistribution, n: usize, c: f64, eval: &Evaluation) -> Self {
        let k = dist.num_features();
        let p = dist.probs();
        let per_feature = eval.loss.clone();
        let restricted = eval.event_loss.clone();
        let total = pairwise(&per_feature);
        let conditional_lower = (k > 1).then(|| {
            let scale = 0.5 * (1.0 + 1.0 / (k as f64 - 1.0));
            (0..k).map(|j| scale * dist.prob_absent(j, n)).collect::<Vec<_>>()
        });
        let lower_per_feature = conditional_lower
            .as_ref()
            .map(|loi| loi.iter().zip(p).map(|(l, p)| l * p).collect::<Vec<_>>());
        LossReport {
            total,
            lower: lower_per_feature.as_ref().map(|v| pairwise(v)),
            lower_per_feature,
            conditional: per_feature.iter().zip(p).map(|(l, p)| l / p).collect(),
            conditional_restricted: restricted.iter().zip(p).map(|(l, p)| l / p).collect(),
            conditional_lower,
            per_feature,
            restricted,
            tail_bound: multinomial_tail_bound(n, k, c),
            c,
            estimator: eval.gradient.estimator,
            std_err: eval.loss_std_err.clone(),
        }
    }

    pub fn num_features(&self) -> usize {
        self.per_feature.len()
    }

    /// `L - Llow`, or `L` when the bound is not applicable.
    pub fn gap(&self) -> f64 {
        self.total - self.lower.unwrap_or(0.0)
    }

    /// `cL_k - Loi_k` per feature.
    pub fn conditional_gaps(&self) -> Vec<f64> {
        match &self.conditional_lower {
            Some(loi) => self.conditional.iter().zip(loi).map(|(c, l)| c - l).collect(),
            None => self.conditional.clone(),
        }
    }

    pub fn max_conditional_gap(&self) -> f64 {
        self.conditional_gaps()
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Slack of both sides of `Lt_k <= L_k - Llow_k <= Lt_k + 3 p_k e^(..)`,
    /// as `(lower_slack, upper_slack)` per feature; nonnegative when it holds.
    pub fn sandwich_slack(&self, dist: &TokenDistribution) -> Option<Vec<(f64, f64)>> {
        let low = self.lower_per_feature.as_ref()?;
        Some(
            (0..self.num_features())
                .map(|k| {
                    let mid = self.per_feature[k] - low[k];
                    (
                        mid - self.restricted[k],
                        self.restricted[k] + dist.prob(k) * self.tail_bound - mid,
                    )
                })
                .collect(),
        )
    }

    /// Same sandwich for the conditional errors against `Loi_k`.
    pub fn conditional_sandwich_slack(&self) -> Option<Vec<(f64, f64)>> {
        let loi = self.conditional_lower.as_ref()?;
        Some(
            (0..self.num_features())
                .map(|k| {
                    let mid = self.conditional[k] - loi[k];
                    (
                        mid - self.conditional_restricted[k],
                        self.conditional_restricted[k] + self.tail_bound - mid,
                    )
                })
                .collect(),
        )
    }
}

fn pairwise(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise(&v[..n / 2]) + pairwise(&v[n / 2..]),
    }
}

/// Loss report with exact enumeration when it fits the default budget and
/// Monte Carlo (seed 0) otherwise.
pub fn loss_report(
    dist: &TokenDistribution,
    n: usize,
    weights: &ReducedWeights,
    c: f64,
) -> Result<LossReport> {
    let eval = Evaluator::new(dist, n, Estimator::Auto, DEFAULT_ENUMERATION_BUDGET, 0, c)?;
    let e = eval.evaluate(weights, 0)?;
    Ok(LossReport::from_evaluation(dist, n, c, &e))
}

/// Constants of the phase predicates. Defaults are the literal values of
/// the analysis; every field can be overridden.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseThresholds {
    /// Replaces `log K` in every threshold.
    pub log_k: Option<f64>,
    /// Event constant for the `L`/`U` interval constants; `None` uses the
    /// trajectory's.
    pub c: Option<f64>,
    /// Balanced phase I: `A_k <= balanced_a * log K`.
    pub balanced_a: f64,
    /// Numerator under the square root in the stage-I gap threshold.
    pub balanced_sqrt: f64,
    /// Balanced stage II ends once `Lt_k <= balanced_loss_fraction * p_k * eps`.
    pub balanced_loss_fraction: f64,
    /// Imbalanced phase I: `B_{k,1} >= imbalanced_b1 * log K`.
    pub imbalanced_b1: f64,
    /// Imbalanced phase II: `A_k - B_{k,1} <= imbalanced_gap * log K`.
    pub imbalanced_gap: f64,
    /// Imbalanced phase III: `A_k <= imbalanced_a * log K`.
    pub imbalanced_a: f64,
    /// Exponent of `K` in the phase IV threshold.
    pub imbalanced_exponent: f64,
    pub imbalanced_sqrt: f64,
    /// Numerator under the square root in the dominant-feature threshold.
    pub dominant_sqrt: f64,
}

impl Default for PhaseThresholds {
    fn default() -> Self {
        Self {
            log_k: None,
            c: None,
            balanced_a: 1.0,
            balanced_sqrt: 3.0,
            balanced_loss_fraction: 0.5,
            imbalanced_b1: -0.49,
            imbalanced_gap: 1.01,
            imbalanced_a: 1.0,
            imbalanced_exponent: 0.51,
            imbalanced_sqrt: 3.0,
            dominant_sqrt: 2.0,
        }
    }
}

impl PhaseThresholds {
    fn log_k(&self, k: usize) -> f64 {
        self.log_k.unwrap_or((k as f64).ln())
    }
}

/// One phase boundary: the last recorded iteration (within the phase's
/// range) at which its predicate holds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Boundary {
    pub name: &'static str,
    /// `None` when the threshold is undefined (see `threshold`).
    pub t: Option<usize>,
    /// Threshold value; NaN when the interval constants make it undefined.
    pub threshold: f64,
    /// Whether the predicate has stopped holding by the end of the record.
    pub completed: bool,
    /// The predicate held again after it first stopped holding.
    pub ambiguous: bool,
    /// Last iteration before the predicate first failed.
    pub first_exit: Option<usize>,
    /// Last iteration at which the predicate held.
    pub last_below: Option<usize>,
}

impl Boundary {
    fn undefined(name: &'static str, threshold: f64) -> Self {
        Self {
            name,
            t: None,
            threshold,
            completed: false,
            ambiguous: false,
            first_exit: None,
            last_below: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeaturePhases {
    /// 1-based feature label.
    pub feature: usize,
    pub boundaries: Vec<Boundary>,
}

impl FeaturePhases {
    pub fn get(&self, name: &str) -> Option<&Boundary> {
        self.boundaries.iter().find(|b| b.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseReport {
    pub regime: Regime,
    pub horizon: usize,
    pub epsilon: f64,
    pub c: f64,
    pub log_k: f64,
    pub features: Vec<FeaturePhases>,
}

impl PhaseReport {
    /// Boundary `name` of feature `k` (0-based).
    pub fn boundary(&self, k: usize, name: &str) -> Option<&Boundary> {
        self.features.get(k)?.get(name)
    }
}

/// Scans snapshots with `t > after` (all of them when `after` is `None`).
/// When the predicate never holds in range the boundary sits at `after`.
fn scan<F: Fn(&Snapshot) -> bool>(
    name: &'static str,
    threshold: f64,
    snaps: &[Snapshot],
    after: Option<usize>,
    holds: F,
) -> Boundary {
    if threshold.is_nan() {
        return Boundary::undefined(name, threshold);
    }
    let range: Vec<&Snapshot> = snaps
        .iter()
        .filter(|s| after.map_or(true, |a| s.t > a))
        .collect();
    let flags: Vec<bool> = range.iter().map(|s| holds(s)).collect();
    let last_below = flags.iter().rposition(|&h| h).map(|i| range[i].t);
    let exit = flags.iter().position(|&h| !h);
    let first_exit = match exit {
        Some(0) => after,
        Some(i) => Some(range[i - 1].t),
        None => last_below,
    };
    let ambiguous = exit.map_or(false, |i| flags[i..].iter().any(|&h| h));
    let completed = flags.last().map_or(true, |&h| !h);
    Boundary {
        name,
        t: last_below.or(after),
        threshold,
        completed,
        ambiguous,
        first_exit,
        last_below,
    }
}

fn check_record(traj: &TrajectoryRecord, dist: &TokenDistribution) -> Result<()> {
    if traj.num_features != dist.num_features() {
        return Err(Error::Dimension("trajectory and distribution disagree on K".into()));
    }
    if traj.snapshots.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    Ok(())
}

/// `log` of a positive argument, NaN otherwise.
fn log_or_nan(x: f64) -> f64 {
    if x > 0.0 && x.is_finite() {
        x.ln()
    } else {
        f64::NAN
    }
}

/// Balanced boundaries per feature: `T1` (`A_k <= log K`), `T2tilde` (gap
/// `A_k - max_m B_{k,m}` below `log((K/L_k - 1)(sqrt(3/eps) - 1))` after
/// `T1`) and `T2` (first step after `T2tilde` with the restricted loss at or
/// below `p_k eps / 2`).
pub fn detect_phases_balanced(
    traj: &TrajectoryRecord,
    dist: &TokenDistribution,
    n: usize,
    epsilon: f64,
    th: &PhaseThresholds,
) -> Result<PhaseReport> {
    check_record(traj, dist)?;
    if dist.regime() == Regime::Imbalanced {
        return Err(Error::RegimeMismatch {
            expected: "balanced",
            actual: dist.regime().name(),
        });
    }
    let _ = n;
    let k = dist.num_features();
    let kk = k as f64;
    let log_k = th.log_k(k);
    let c = th.c.unwrap_or(traj.event_c);
    let consts = event_constants(dist, c);
    let snaps = &traj.snapshots;
    let features = (0..k)
        .map(|j| {
            let a_th = th.balanced_a * log_k;
            let t1 = scan("T1", a_th, snaps, None, |s| s.weights.a(j) <= a_th);
            let lower = consts.lower[j];
            let gap_th = if lower > 0.0 {
                log_or_nan((kk / lower - 1.0) * ((th.balanced_sqrt / epsilon).sqrt() - 1.0))
            } else {
                f64::NAN
            };
            let t2t = scan("T2tilde", gap_th, snaps, t1.t, |s| {
                s.weights.a(j) - s.weights.max_b(j) <= gap_th
            });
            let loss_th = th.balanced_loss_fraction * dist.prob(j) * epsilon;
            let t2 = match t2t.t {
                Some(start) => {
                    let hit = snaps
                        .iter()
                        .find(|s| s.t > start && s.loss.restricted[j] <= loss_th)
                        .map(|s| s.t);
                    Boundary {
                        name: "T2",
                        t: hit.or(Some(traj.horizon)),
                        threshold: loss_th,
                        completed: hit.is_some(),
                        ambiguous: false,
                        first_exit: hit,
                        last_below: hit,
                    }
                }
                None => Boundary::undefined("T2", loss_th),
            };
            FeaturePhases {
                feature: j + 1,
                boundaries: vec![t1, t2t, t2],
            }
        })
        .collect();
    Ok(PhaseReport {
        regime: dist.regime(),
        horizon: traj.horizon,
        epsilon,
        c,
        log_k,
        features,
    })
}

/// Imbalanced boundaries: `T1..T4` for every `k > 1` and `T1star` for the
/// dominant feature.
pub fn detect_phases_imbalanced(
    traj: &TrajectoryRecord,
    dist: &TokenDistribution,
    n: usize,
    epsilon: f64,
    th: &PhaseThresholds,
) -> Result<PhaseReport> {
    check_record(traj, dist)?;
    if dist.regime() != Regime::Imbalanced {
        return Err(Error::RegimeMismatch {
            expected: "imbalanced",
            actual: dist.regime().name(),
        });
    }
    let _ = n;
    let k = dist.num_features();
    let kk = k as f64;
    let log_k = th.log_k(k);
    let c = th.c.unwrap_or(traj.event_c);
    let consts = event_constants(dist, c);
    let (l1, u1) = (consts.lower[0], consts.upper[0]);
    let snaps = &traj.snapshots;

    let dom_th = if l1 > 0.0 {
        log_or_nan((1.0 / l1 - 1.0) * ((th.dominant_sqrt / epsilon).sqrt() - 1.0))
    } else {
        f64::NAN
    };
    let mut features = vec![FeaturePhases {
        feature: 1,
        boundaries: vec![scan("T1star", dom_th, snaps, None, |s| {
            s.weights.a(0) - s.weights.max_b(0) <= dom_th
        })],
    }];
    for j in 1..k {
        let b_th = th.imbalanced_b1 * log_k;
        let t1 = scan("T1", b_th, snaps, None, |s| s.weights.b(j, 0) >= b_th);
        let gap_th = th.imbalanced_gap * log_k;
        let t2 = scan("T2", gap_th, snaps, t1.t, |s| {
            s.weights.a(j) - s.weights.b(j, 0) <= gap_th
        });
        let a_th = th.imbalanced_a * log_k;
        let t3 = scan("T3", a_th, snaps, t2.t, |s| s.weights.a(j) <= a_th);
        let lower = consts.lower[j];
        let t4_th = if lower > 0.0 && l1 > 0.0 {
            let num = std::f64::consts::E * (1.0 - l1) * kk
                + u1 * (th.imbalanced_exponent * log_k).exp();
            log_or_nan((num / lower - 1.0) * ((th.imbalanced_sqrt / epsilon).sqrt() - 1.0))
        } else {
            f64::NAN
        };
        let t4 = if t3.t.is_some() {
            scan("T4", t4_th, snaps, t3.t, |s| s.weights.a(j) <= t4_th)
        } else {
            Boundary::undefined("T4", t4_th)
        };
        features.push(FeaturePhases {
            feature: j + 1,
            boundaries: vec![t1, t2, t3, t4],
        });
    }
    Ok(PhaseReport {
        regime: dist.regime(),
        horizon: traj.horizon,
        epsilon,
        c,
        log_k,
        features,
    })
}

/// Runs `trials` seeded draws split into fixed blocks; block `b` uses
/// stream `b` of a ChaCha generator seeded with `seed`.
fn seeded_blocks<T, F>(trials: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng, usize) -> T + Sync,
{
    let blocks = trials.div_ceil(TRIAL_BLOCK);
    (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            f(&mut rng, TRIAL_BLOCK.min(trials - b * TRIAL_BLOCK))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureConcentration {
    pub feature: usize,
    /// Event-member draws, each evaluated with query `k`.
    pub members: usize,
    /// Members with `(1 - Attn_k)^2 <= C eps`.
    pub passed: usize,
    pub pass_rate: f64,
    pub min_attn: f64,
    pub mean_attn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationReport {
    pub trials: usize,
    pub c_conc: f64,
    pub epsilon: f64,
    pub features: Vec<FeatureConcentration>,
    /// Fraction of draws outside the event.
    pub non_member_rate: f64,
    pub tail_bound: f64,
}

impl ConcentrationReport {
    pub fn min_pass_rate(&self) -> f64 {
        self.features.iter().map(|f| f.pass_rate).fold(f64::INFINITY, f64::min)
    }

    pub fn min_attn(&self) -> f64 {
        self.features.iter().map(|f| f.min_attn).fold(f64::INFINITY, f64::min)
    }
}

/// Draws `trials` count vectors and, on event members, checks
/// `(1 - Attn_k)^2 <= c_conc * eps` for every query `k`.
#[allow(clippy::too_many_arguments)]
pub fn attention_concentration<R: Rng + ?Sized>(
    weights: &ReducedWeights,
    dist: &TokenDistribution,
    n: usize,
    epsilon: f64,
    c_conc: f64,
    c: f64,
    trials: usize,
    rng: &mut R,
) -> Result<ConcentrationReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    let k = dist.num_features();
    if weights.num_features() != k {
        return Err(Error::Dimension("weights and distribution disagree on K".into()));
    }
    let intervals = event_intervals(dist, n, c);
    let limit = c_conc * epsilon;
    let seed = rng.gen::<u64>();
    // Per block: members, then per feature (passed, min, sum).
    let parts = seeded_blocks(trials, seed, |rng, len| {
        let mut members = 0usize;
        let mut passed = vec![0usize; k];
        let mut min = vec![f64::INFINITY; k];
        let mut sum = vec![0.0; k];
        for _ in 0..len {
            let c = PromptCounts::new(draw_multinomial(dist.probs(), n as u64, rng))
                .expect("draw is nonempty");
            if !in_event(c.counts(), &intervals) {
                continue;
            }
            members += 1;
            for q in 0..k {
                let attn = attention_profile(&c, q, weights).expect("shapes checked").scores[q];
                if (1.0 - attn).powi(2) <= limit {
                    passed[q] += 1;
                }
                min[q] = min[q].min(attn);
                sum[q] += attn;
            }
        }
        (members, passed, min, sum)
    });
    let members: usize = parts.iter().map(|p| p.0).sum();
    let features = (0..k)
        .map(|q| {
            let passed: usize = parts.iter().map(|p| p.1[q]).sum();
            let min = parts.iter().map(|p| p.2[q]).fold(f64::INFINITY, f64::min);
            let sum = pairwise(&parts.iter().map(|p| p.3[q]).collect::<Vec<_>>());
            FeatureConcentration {
                feature: q + 1,
                members,
                passed,
                pass_rate: if members > 0 { passed as f64 / members as f64 } else { f64::NAN },
                min_attn: if members > 0 { min } else { f64::NAN },
                mean_attn: if members > 0 { sum / members as f64 } else { f64::NAN },
            }
        })
        .collect();
    Ok(ConcentrationReport {
        trials,
        c_conc,
        epsilon,
        features,
        non_member_rate: (trials - members) as f64 / trials as f64,
        tail_bound: multinomial_tail_bound(n, k, c),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IclReport {
    pub query: usize,
    pub trials: usize,
    pub mean_error: f64,
    pub max_error: f64,
    /// Mean and max of `(1 - Attn_k) max_m |<w, v_k - v_m>|`.
    pub mean_bound: f64,
    pub max_bound: f64,
    /// `max_m |<w, v_k - v_m>|`.
    pub scale: f64,
    /// Trials whose error exceeded their own bound.
    pub bound_violations: usize,
}

/// Samples prompts with task vector `w_test`, runs the lifted model on each
/// and compares `y_hat` with `<w_test, v_k>`.
#[allow(clippy::too_many_arguments)]
pub fn icl_test<R: Rng + ?Sized>(
    weights: &ReducedWeights,
    basis: &FeatureBasis,
    w_test: &DVector<f64>,
    query: usize,
    dist: &TokenDistribution,
    n: usize,
    trials: usize,
    rng: &mut R,
) -> Result<IclReport> {
    let k = dist.num_features();
    if trials == 0 || n == 0 {
        return Err(Error::InvalidArgument("trials and N must be at least 1".into()));
    }
    if basis.num_features() != k || weights.num_features() != k || query >= k {
        return Err(Error::Dimension("basis, weights and distribution disagree on K".into()));
    }
    if w_test.len() != basis.dim() {
        return Err(Error::Dimension("task vector length differs from d".into()));
    }
    let q: DMatrix<f64> = lift(weights, basis);
    let proj = basis.project(w_test);
    let target = proj[query];
    let scale = proj.iter().map(|p| (target - p).abs()).fold(0.0, f64::max);
    let sampler = WeightedIndex::new(dist.probs())
        .map_err(|e| Error::Distribution(e.to_string()))?;
    let seed = rng.gen::<u64>();
    let parts = seeded_blocks(trials, seed, |rng, len| -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let tokens: Vec<usize> = (0..n).map(|_| sampler.sample(rng)).collect();
            let prompt = Prompt::new(tokens, query, Some(w_test.clone()))?;
            let y_hat = forward(&embed(&prompt, basis)?, &q)?;
            let attn = attention_profile(&prompt.counts(k)?, query, weights)?.scores[query];
            out.push(((y_hat - target).abs(), (1.0 - attn) * scale));
        }
        Ok(out)
    });
    let mut rows = Vec::with_capacity(trials);
    for p in parts {
        rows.extend(p?);
    }
    let errors: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let bounds: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let tf = trials as f64;
    Ok(IclReport {
        query,
        trials,
        mean_error: pairwise(&errors) / tf,
        max_error: errors.iter().cloned().fold(0.0, f64::max),
        mean_bound: pairwise(&bounds) / tf,
        max_bound: bounds.iter().cloned().fold(0.0, f64::max),
        scale,
        bound_violations: rows.iter().filter(|(e, b)| *e > *b + 1e-12).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradient::EstimatorKind;
    use crate::trainer::StopRule;
    use approx::assert_abs_diff_eq;

    fn synthetic(k: usize, f: impl Fn(usize) -> ReducedWeights, steps: usize) -> TrajectoryRecord {
        let snaps = (0..=steps)
            .map(|t| Snapshot {
                t,
                weights: f(t),
                alpha: vec![0.0; k],
                beta: DMatrix::zeros(k, k),
                loss: LossReport {
                    total: 0.0,
                    per_feature: vec![0.0; k],
                    restricted: vec![1.0; k],
                    lower: None,
                    lower_per_feature: None,
                    conditional: vec![0.0; k],
                    conditional_restricted: vec![0.0; k],
                    conditional_lower: None,
                    tail_bound: 1.0,
                    c: 0.1,
                    estimator: EstimatorKind::Exact,
                    std_err: None,
                },
                gap: 0.0,
            })
            .collect();
        TrajectoryRecord {
            num_features: k,
            num_tokens: 100,
            eta: 1.0,
            regime: Regime::Balanced,
            estimator: EstimatorKind::Exact,
            samples: None,
            seed: 0,
            epsilon: 0.01,
            event_c: 0.1,
            stop_rule: StopRule::Never,
            snapshots: snaps,
            stopped_at: None,
            horizon: steps,
            final_weights: f(steps),
            final_q: None,
        }
    }

    #[test]
    fn loss_report_two_by_two() {
        let dist = TokenDistribution::balanced(2).unwrap();
        let r = loss_report(&dist, 2, &ReducedWeights::zeros(2), 0.5).unwrap();
        assert_abs_diff_eq!(r.total, 3.0 / 8.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.lower.unwrap(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(r.per_feature.iter().sum::<f64>(), r.total, epsilon = 1e-15);
    }

    #[test]
    fn single_feature_has_no_lower_bound() {
        let dist = TokenDistribution::new(vec![1.0], Regime::Custom).unwrap();
        let r = loss_report(&dist, 5, &ReducedWeights::zeros(1), 1.0).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(r.lower.is_none() && r.conditional_lower.is_none());
    }

    #[test]
    fn balanced_t1_on_linear_ramp() {
        let dist = TokenDistribution::balanced(3).unwrap();
        let traj = synthetic(3, |t| {
            let mut m = ReducedWeights::zeros(3);
            for j in 0..3 {
                m.set_a(j, 0.1 * t as f64);
            }
            m
        }, 30);
        let th = PhaseThresholds { log_k: Some(1.0), ..Default::default() };
        let rep = detect_phases_balanced(&traj, &dist, 100, 0.01, &th).unwrap();
        let t1 = rep.boundary(0, "T1").unwrap();
        assert_eq!(t1.t, Some(10));
        assert!(t1.completed && !t1.ambiguous);
    }

    #[test]
    fn flat_trajectory_never_completes() {
        let dist = TokenDistribution::balanced(2).unwrap();
        let traj = synthetic(2, |_| ReducedWeights::zeros(2), 12);
        let rep = detect_phases_balanced(&traj, &dist, 100, 0.01, &PhaseThresholds::default()).unwrap();
        let t1 = rep.boundary(1, "T1").unwrap();
        assert_eq!(t1.t, Some(12));
        assert!(!t1.completed);
    }

    #[test]
    fn non_monotone_signal_is_flagged() {
        let dist = TokenDistribution::balanced(2).unwrap();
        let values = [0.0, 0.5, 2.0, 0.2, 3.0, 4.0];
        let traj = synthetic(2, |t| {
            let mut m = ReducedWeights::zeros(2);
            m.set_a(0, values[t]);
            m
        }, 5);
        let th = PhaseThresholds { log_k: Some(1.0), ..Default::default() };
        let t1 = detect_phases_balanced(&traj, &dist, 100, 0.01, &th)
            .unwrap()
            .boundary(0, "T1")
            .unwrap()
            .clone();
        assert!(t1.ambiguous);
        assert_eq!(t1.first_exit, Some(1));
        assert_eq!(t1.last_below, Some(3));
        assert_eq!(t1.t, Some(3));
    }

    #[test]
    fn imbalanced_t1_on_linear_ramp() {
        let dist = TokenDistribution::imbalanced(3, 0.5).unwrap();
        let log_k = 3f64.ln();
        let mut traj = synthetic(3, |t| {
            let mut m = ReducedWeights::zeros(3);
            for j in 1..3 {
                m.set_b(j, 0, -0.05 * t as f64 * log_k);
            }
            m
        }, 20);
        traj.regime = Regime::Imbalanced;
        let rep = detect_phases_imbalanced(&traj, &dist, 100, 0.01, &PhaseThresholds::default()).unwrap();
        assert_eq!(rep.boundary(1, "T1").unwrap().t, Some(9));
        assert_eq!(rep.boundary(0, "T1star").unwrap().name, "T1star");
    }

    #[test]
    fn detectors_check_regime() {
        let bal = TokenDistribution::balanced(2).unwrap();
        let traj = synthetic(2, |_| ReducedWeights::zeros(2), 3);
        assert!(matches!(
            detect_phases_imbalanced(&traj, &bal, 100, 0.01, &PhaseThresholds::default()),
            Err(Error::RegimeMismatch { .. })
        ));
    }

    #[test]
    fn undefined_threshold_reports_nan() {
        let dist = TokenDistribution::balanced(2).unwrap();
        let traj = synthetic(2, |_| ReducedWeights::zeros(2), 3);
        let th = PhaseThresholds { c: Some(5.0), ..Default::default() };
        let b = detect_phases_balanced(&traj, &dist, 100, 0.01, &th).unwrap();
        let t2t = b.boundary(0, "T2tilde").unwrap();
        assert!(t2t.threshold.is_nan() && t2t.t.is_none() && !t2t.completed);
    }

    #[test]
    fn concentration_extremes() {
        let dist = TokenDistribution::balanced(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zero = attention_concentration(&ReducedWeights::zeros(4), &dist, 64, 0.01, 3.0, 2.0, 2000, &mut rng).unwrap();
        assert!(zero.min_pass_rate() < 0.01);
        let mut m = ReducedWeights::zeros(4);
        for j in 0..4 {
            m.set_a(j, 50.0);
        }
        let sat = attention_concentration(&m, &dist, 64, 0.01, 3.0, 2.0, 2000, &mut rng).unwrap();
        assert_eq!(sat.min_pass_rate(), 1.0);
    }

    #[test]
    fn icl_zero_task_is_exact() {
        let dist = TokenDistribution::balanced(3).unwrap();
        let basis = FeatureBasis::identity(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rep = icl_test(&ReducedWeights::zeros(3), &basis, &DVector::zeros(3), 0, &dist, 20, 50, &mut rng).unwrap();
        assert_eq!(rep.max_error, 0.0);
    }
}
