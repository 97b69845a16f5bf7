//! Full-batch gradient descent on the population loss from zero
//! initialization, in the reduced `K x K` parametrization, the ambient
//! `d x d` one, or both in lockstep.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::analysis::LossReport;
use crate::attention::{reduce, ReducedWeights};
use crate::error::{Error, Result};
use crate::features::{
    default_event_constant, BasisMode, FeatureBasis, Regime, TokenDistribution,
    DEFAULT_ENUMERATION_BUDGET,
};
use crate::gradient::{full_q_gradient_table, Estimator, EstimatorKind, Evaluator, GradientReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Reduced,
    Full,
    Both,
}

/// Which loss gap ends a run early.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// `TotalGap` for balanced and custom regimes, `ConditionalGap` for imbalanced.
    Auto,
    /// Run for the full iteration budget.
    Never,
    /// `L - Llow <= epsilon`.
    TotalGap,
    /// `max_k (cL_k - Loi_k) <= epsilon`.
    ConditionalGap,
    /// `A_k > log K` for every `k`, i.e. every feature has left phase I.
    PhaseOne,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub dist: TokenDistribution,
    pub n: usize,
    pub d: usize,
    pub eta: f64,
    pub max_iters: usize,
    pub estimator: Estimator,
    pub mode: TrainMode,
    pub record_every: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub basis: BasisMode,
    /// Event constant for restricted losses; `None` means `sqrt(20 K^3 / N)`.
    pub event_c: Option<f64>,
    pub stop: StopRule,
    pub budget: usize,
}

impl TrainConfig {
    /// Defaults: `d = K`, exact-or-MC estimator, reduced mode, identity
    /// basis, `epsilon = 0.01`, stop rule chosen by regime.
    pub fn new(dist: TokenDistribution, n: usize, eta: f64, max_iters: usize) -> Self {
        let k = dist.num_features();
        Self {
            dist,
            n,
            d: k,
            eta,
            max_iters,
            estimator: Estimator::Auto,
            mode: TrainMode::Reduced,
            record_every: default_record_every(max_iters),
            seed: 0,
            epsilon: 0.01,
            basis: BasisMode::Identity,
            event_c: None,
            stop: StopRule::Auto,
            budget: DEFAULT_ENUMERATION_BUDGET,
        }
    }

    pub fn num_features(&self) -> usize {
        self.dist.num_features()
    }

    pub fn event_constant(&self) -> f64 {
        self.event_c
            .unwrap_or_else(|| default_event_constant(self.num_features(), self.n))
    }

    pub fn stop_rule(&self) -> StopRule {
        match self.stop {
            StopRule::Auto if self.dist.regime() == Regime::Imbalanced => StopRule::ConditionalGap,
            StopRule::Auto => StopRule::TotalGap,
            other => other,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be positive, got {}", self.eta)));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be at least 1".into()));
        }
        if self.n == 0 {
            return Err(Error::InvalidArgument("N must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if self.d < self.num_features() {
            return Err(Error::Dimension(format!(
                "need K <= d, got K={}, d={}",
                self.num_features(),
                self.d
            )));
        }
        if self.mode != TrainMode::Reduced
            && matches!(self.estimator, Estimator::MonteCarlo { .. })
        {
            return Err(Error::InvalidArgument(
                "full and dual modes need an enumerating estimator".into(),
            ));
        }
        Ok(())
    }
}

/// 1 for runs up to `10^4` steps, 10 beyond.
pub fn default_record_every(max_iters: usize) -> usize {
    if max_iters <= 10_000 {
        1
    } else {
        10
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub t: usize,
    pub weights: ReducedWeights,
    pub alpha: Vec<f64>,
    #[serde(serialize_with = "crate::report::serialize_matrix")]
    pub beta: DMatrix<f64>,
    pub loss: LossReport,
    /// Value compared against epsilon by the stop rule.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub num_features: usize,
    pub num_tokens: usize,
    pub eta: f64,
    pub regime: Regime,
    pub estimator: EstimatorKind,
    pub samples: Option<usize>,
    pub seed: u64,
    pub epsilon: f64,
    pub event_c: f64,
    pub stop_rule: StopRule,
    pub snapshots: Vec<Snapshot>,
    /// First step at which the stop rule fired.
    pub stopped_at: Option<usize>,
    /// Last iteration evaluated.
    pub horizon: usize,
    pub final_weights: ReducedWeights,
    #[serde(serialize_with = "crate::report::serialize_opt_matrix")]
    pub final_q: Option<DMatrix<f64>>,
}

impl TrajectoryRecord {
    pub fn first(&self) -> &Snapshot {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("records hold the t=0 snapshot")
    }

    /// Snapshot recorded at iteration `t`, if any.
    pub fn at(&self, t: usize) -> Option<&Snapshot> {
        self.snapshots
            .binary_search_by_key(&t, |s| s.t)
            .ok()
            .map(|i| &self.snapshots[i])
    }

    pub fn converged(&self) -> bool {
        self.stopped_at.is_some()
    }
}

/// `A_k += eta alpha_k`, `B_{k,n} += eta beta_{k,n}`.
pub fn gd_step(weights: &ReducedWeights, report: &GradientReport, eta: f64) -> Result<ReducedWeights> {
    if report.num_features() != weights.num_features() {
        return Err(Error::Dimension("gradient and weights disagree on K".into()));
    }
    ReducedWeights::from_matrix(weights.matrix() + report.ascent_matrix() * eta)
}

pub fn gd_run(config: &TrainConfig) -> Result<TrajectoryRecord> {
    Ok(run(config)?.primary)
}

/// Outcome of a lockstep reduced/full run.
#[derive(Debug, Clone)]
pub struct DualRun {
    pub reduced: TrajectoryRecord,
    pub full: TrajectoryRecord,
    /// `max_t max_{n,k} |reduce(Q_t) - M_t|` over every step.
    pub divergence: f64,
    pub basis: FeatureBasis,
}

pub fn dual_mode_run(config: &TrainConfig) -> Result<DualRun> {
    let mut config = config.clone();
    config.mode = TrainMode::Both;
    let out = run(&config)?;
    Ok(DualRun {
        reduced: out.primary,
        full: out.full.expect("both mode tracks Q"),
        divergence: out.divergence,
        basis: out.basis,
    })
}

struct RunOutput {
    primary: TrajectoryRecord,
    full: Option<TrajectoryRecord>,
    divergence: f64,
    basis: FeatureBasis,
}

struct Track {
    record: TrajectoryRecord,
}

impl Track {
    fn new(config: &TrainConfig, eval: &Evaluator, c: f64) -> Self {
        let k = config.num_features();
        Self {
            record: TrajectoryRecord {
                num_features: k,
                num_tokens: config.n,
                eta: config.eta,
                regime: config.dist.regime(),
                estimator: eval.kind(),
                samples: eval.samples(),
                seed: config.seed,
                epsilon: config.epsilon,
                event_c: c,
                stop_rule: config.stop_rule(),
                snapshots: Vec::new(),
                stopped_at: None,
                horizon: 0,
                final_weights: ReducedWeights::zeros(k),
                final_q: None,
            },
        }
    }

    fn push(&mut self, snap: Snapshot, keep: bool) {
        self.record.horizon = snap.t;
        self.record.final_weights = snap.weights.clone();
        let replace = self.record.snapshots.last().map_or(false, |s| s.t == snap.t);
        if replace {
            *self.record.snapshots.last_mut().unwrap() = snap;
        } else if keep {
            self.record.snapshots.push(snap);
        }
    }

    /// Make sure the last evaluated step is recorded.
    fn close(&mut self, last: Snapshot) {
        if self.record.snapshots.last().map(|s| s.t) != Some(last.t) {
            self.record.snapshots.push(last);
        }
    }
}

fn gap_for(rule: StopRule, loss: &LossReport) -> f64 {
    match rule {
        StopRule::ConditionalGap => loss.max_conditional_gap(),
        _ => loss.gap(),
    }
}

fn should_stop(rule: StopRule, gap: f64, weights: &ReducedWeights, epsilon: f64) -> bool {
    match rule {
        StopRule::Never => false,
        StopRule::PhaseOne => {
            let log_k = (weights.num_features() as f64).ln();
            (0..weights.num_features()).all(|k| weights.a(k) > log_k)
        }
        _ => gap <= epsilon,
    }
}

fn abort(t: usize, reason: String, mut track: Track, last: Option<Snapshot>) -> Error {
    if let Some(s) = last {
        track.close(s);
    }
    Error::NumericAbort {
        t,
        reason,
        record: Box::new(track.record),
    }
}

fn run(config: &TrainConfig) -> Result<RunOutput> {
    config.validate()?;
    let k = config.num_features();
    let c = config.event_constant();
    let rule = config.stop_rule();
    let eval = Evaluator::new(&config.dist, config.n, config.estimator, config.budget, config.seed, c)?;
    let basis = FeatureBasis::build(config.d, k, config.seed, config.basis)?;
    let track_reduced = config.mode != TrainMode::Full;
    let track_full = config.mode != TrainMode::Reduced;

    let mut m = ReducedWeights::zeros(k);
    let mut q = DMatrix::<f64>::zeros(config.d, config.d);
    let mut reduced = Track::new(config, &eval, c);
    let mut full = Track::new(config, &eval, c);
    let mut divergence: f64 = 0.0;
    let mut last_reduced = None;
    let mut last_full = None;

    for t in 0..=config.max_iters {
        let keep = t % config.record_every == 0;
        let mut stop = false;
        let mut reduced_eval = None;
        if track_reduced {
            if !m.is_finite() {
                return Err(abort(t, "reduced weights are not finite".into(), reduced, last_reduced));
            }
            let e = eval.evaluate(&m, t)?;
            let loss = LossReport::from_evaluation(&config.dist, config.n, c, &e);
            let gap = gap_for(rule, &loss);
            stop = should_stop(rule, gap, &m, config.epsilon);
            let snap = Snapshot {
                t,
                weights: m.clone(),
                alpha: e.gradient.alpha.clone(),
                beta: e.gradient.beta.clone(),
                loss,
                gap,
            };
            reduced.push(snap.clone(), keep);
            last_reduced = Some(snap);
            reduced_eval = Some(e);
        }
        let mut full_grad = None;
        if track_full {
            if !q.iter().all(|x| x.is_finite()) {
                return Err(abort(t, "Q is not finite".into(), full, last_full));
            }
            let mq = reduce(&q, &basis);
            if track_reduced {
                divergence = divergence.max((mq.matrix() - m.matrix()).amax());
            }
            let table = eval.table().expect("validated: full mode enumerates");
            let grad = full_q_gradient_table(table, &config.dist, &q, &basis)?;
            let e = eval.evaluate(&mq, t)?;
            let loss = LossReport::from_evaluation(&config.dist, config.n, c, &e);
            let gap = gap_for(rule, &loss);
            let ascent = reduce(&(-&grad), &basis);
            let alpha = (0..k).map(|j| ascent.a(j)).collect();
            let beta = DMatrix::from_fn(k, k, |j, n| if j == n { 0.0 } else { ascent.b(j, n) });
            if !track_reduced {
                stop = should_stop(rule, gap, &mq, config.epsilon);
            }
            let snap = Snapshot { t, weights: mq, alpha, beta, loss, gap };
            full.push(snap.clone(), keep);
            last_full = Some(snap);
            full_grad = Some(grad);
        }
        if stop {
            reduced.record.stopped_at = Some(t);
            full.record.stopped_at = Some(t);
            break;
        }
        if t == config.max_iters {
            break;
        }
        if let Some(e) = reduced_eval {
            m = gd_step(&m, &e.gradient, config.eta)?;
        }
        if let Some(g) = full_grad {
            q -= g * config.eta;
        }
    }

    if let Some(s) = last_reduced {
        reduced.close(s);
    }
    if let Some(s) = last_full {
        full.close(s);
    }
    if track_full {
        full.record.final_q = Some(q.clone());
    }
    let (primary, full) = match config.mode {
        TrainMode::Reduced => (reduced.record, None),
        TrainMode::Full => (full.record, None),
        TrainMode::Both => (reduced.record, Some(full.record)),
    };
    Ok(RunOutput {
        primary,
        full,
        divergence,
        basis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Regime;
    use approx::assert_abs_diff_eq;

    fn tiny(iters: usize) -> TrainConfig {
        let mut cfg = TrainConfig::new(TokenDistribution::balanced(2).unwrap(), 2, 1.0, iters);
        cfg.estimator = Estimator::Exact;
        cfg.stop = StopRule::Never;
        cfg
    }

    #[test]
    fn gd_step_examples() {
        let dist = TokenDistribution::balanced(2).unwrap();
        let g = crate::gradient::population_gradient_exact(&dist, 2, &ReducedWeights::zeros(2)).unwrap();
        let zero = ReducedWeights::zeros(2);
        assert_eq!(gd_step(&zero, &g, 0.0).unwrap(), zero);
        let m = gd_step(&zero, &g, 1.0).unwrap();
        assert_abs_diff_eq!(m.a(0), 1.0 / 16.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.b(0, 1), -1.0 / 16.0, epsilon = 1e-15);
    }

    #[test]
    fn two_small_steps_differ_from_one_large_step() {
        let dist = TokenDistribution::new(vec![0.3, 0.7], Regime::Custom).unwrap();
        let zero = ReducedWeights::zeros(2);
        let g0 = crate::gradient::population_gradient_exact(&dist, 4, &zero).unwrap();
        let one = gd_step(&zero, &g0, 2.0).unwrap();
        let half = gd_step(&zero, &g0, 1.0).unwrap();
        let g1 = crate::gradient::population_gradient_exact(&dist, 4, &half).unwrap();
        let two = gd_step(&half, &g1, 1.0).unwrap();
        assert!((one.matrix() - two.matrix()).amax() > 1e-6);
    }

    #[test]
    fn zero_iterations_records_initial_state() {
        let rec = gd_run(&tiny(0)).unwrap();
        assert_eq!(rec.snapshots.len(), 1);
        assert_eq!(rec.first().t, 0);
        assert!(rec.first().weights.matrix().iter().all(|&x| x == 0.0));
        assert_eq!(rec.horizon, 0);
    }

    #[test]
    fn first_step_matches_hand_gradient() {
        let rec = gd_run(&tiny(1)).unwrap();
        let w = &rec.at(1).unwrap().weights;
        assert_abs_diff_eq!(w.a(0), 1.0 / 16.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w.a(1), 1.0 / 16.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w.b(0, 1), -1.0 / 16.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w.b(1, 0), -1.0 / 16.0, epsilon = 1e-15);
    }

    #[test]
    fn record_every_keeps_final_step() {
        let mut cfg = tiny(7);
        cfg.record_every = 3;
        let rec = gd_run(&cfg).unwrap();
        let ts: Vec<usize> = rec.snapshots.iter().map(|s| s.t).collect();
        assert_eq!(ts, vec![0, 3, 6, 7]);
    }

    #[test]
    fn dual_mode_zero_steps() {
        let run = dual_mode_run(&tiny(0)).unwrap();
        assert_eq!(run.divergence, 0.0);
    }

    #[test]
    fn dual_mode_tracks_reduced_run() {
        let mut cfg = TrainConfig::new(TokenDistribution::balanced(3).unwrap(), 6, 2.0, 30);
        cfg.estimator = Estimator::Exact;
        cfg.stop = StopRule::Never;
        cfg.d = 5;
        cfg.basis = BasisMode::RandomOrthonormal;
        cfg.seed = 3;
        let run = dual_mode_run(&cfg).unwrap();
        assert!(run.divergence <= 1e-10, "{}", run.divergence);
        assert_eq!(run.full.snapshots.len(), run.reduced.snapshots.len());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny(1);
        cfg.eta = 0.0;
        assert!(matches!(gd_run(&cfg), Err(Error::InvalidArgument(_))));
        let mut cfg = tiny(1);
        cfg.mode = TrainMode::Full;
        cfg.estimator = Estimator::MonteCarlo { samples: 10 };
        assert!(gd_run(&cfg).is_err());
    }
}
