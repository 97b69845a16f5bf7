//! Config files, artifacts and the four commands behind the `icl-lab` binary.
//!
//! # Config grammar
//!
//! One `key = value` pair per line. Blank lines and lines starting with `#`
//! are ignored, as is anything after a `#` on a line. Keys:
//!
//! | key | value |
//! |---|---|
//! | `dist` | `balanced(K)` or `imbalanced(K, p1)` |
//! | `p` | comma-separated probabilities (alternative to `dist`) |
//! | `regime` | `balanced`, `imbalanced` or `custom` (with `p`; default `custom`) |
//! | `ratio_bound` | max `p_k / p_m` accepted for `balanced` (default 4) |
//! | `N` | prompt length |
//! | `d` | ambient dimension (default `K`) |
//! | `eta` | learning rate |
//! | `max_iters` | iteration budget |
//! | `estimator` | `auto`, `exact`, `mc(S)` or `truncated(min_prob)` |
//! | `budget` | enumeration budget |
//! | `mode` | `reduced`, `full` or `both` |
//! | `record_every` | snapshot stride |
//! | `seed` | base seed |
//! | `epsilon` | target accuracy |
//! | `c` | event constant (default `sqrt(20 K^3 / N)`) |
//! | `stop` | `auto`, `never`, `total_gap`, `conditional_gap`, `phase_one` |
//! | `basis` | `identity` or `random` |
//! | `output_dir` | artifact directory |
//! | `emit` | subset of `trajectory_csv, phase_json, loss_json, plotdata` |
//! | `threshold.<name>` | override of a [`PhaseThresholds`] field |
//! | `sweep.K` | comma-separated `K` values (needs `dist`) |
//! | `sweep.eta` | comma-separated learning rates |
//! | `sweep.n_per_k2` | sets `N = round(value * K^2)` for each sweep point |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{
    detect_phases_balanced, detect_phases_imbalanced, loss_report, LossReport, PhaseReport,
    PhaseThresholds,
};
use crate::attention::{reduce, ReducedWeights};
use crate::error::{Error, Result};
use crate::features::{
    default_event_constant, event_constants, event_intervals, in_event, multinomial_tail_bound,
    draw_multinomial, BasisMode, CountTable, FeatureBasis, PromptCounts, Regime,
    TokenDistribution, DEFAULT_BALANCED_RATIO, DEFAULT_ENUMERATION_BUDGET,
};
use crate::gradient::{
    evaluate_mc, evaluate_table, finite_diff_check, full_q_gradient_table, Estimator,
};
use crate::report::{fmt_f64, to_json};
use crate::trainer::{dual_mode_run, gd_run, StopRule, TrainConfig, TrainMode, TrajectoryRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Exit code for an error: 3 for a numeric abort, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NumericAbort { .. } | Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DistSpec {
    Balanced(usize),
    Imbalanced(usize, f64),
    Explicit(Vec<f64>, Regime),
}

impl DistSpec {
    pub fn build(&self, ratio_bound: f64) -> Result<TokenDistribution> {
        match self {
            DistSpec::Balanced(k) => TokenDistribution::balanced(*k),
            DistSpec::Imbalanced(k, p1) => TokenDistribution::imbalanced(*k, *p1),
            DistSpec::Explicit(p, r) => TokenDistribution::with_ratio_bound(p.clone(), *r, ratio_bound),
        }
    }

    fn with_k(&self, k: usize) -> Option<DistSpec> {
        match self {
            DistSpec::Balanced(_) => Some(DistSpec::Balanced(k)),
            DistSpec::Imbalanced(_, p1) => Some(DistSpec::Imbalanced(k, *p1)),
            DistSpec::Explicit(..) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Emit {
    pub trajectory_csv: bool,
    pub phase_json: bool,
    pub loss_json: bool,
    pub plotdata: bool,
}

impl Default for Emit {
    fn default() -> Self {
        Self {
            trajectory_csv: true,
            phase_json: true,
            loss_json: true,
            plotdata: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub dist: DistSpec,
    pub ratio_bound: f64,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub emit: Emit,
    pub thresholds: PhaseThresholds,
    pub sweep_k: Vec<usize>,
    pub sweep_eta: Vec<f64>,
    pub sweep_n_per_k2: Option<f64>,
}

fn cfg_err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| cfg_err(line, format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num(line, key, s))
        .collect()
}

/// `name(args)` to `(name, args)`; plain `name` gives empty args.
fn call_form(v: &str) -> Option<(&str, Vec<&str>)> {
    let v = v.trim();
    match v.find('(') {
        None => Some((v, Vec::new())),
        Some(i) => {
            let inner = v[i + 1..].strip_suffix(')')?;
            Some((v[..i].trim(), inner.split(',').map(str::trim).collect()))
        }
    }
}

fn parse_dist(line: usize, v: &str) -> Result<DistSpec> {
    let bad = || cfg_err(line, format!("`dist`: expected balanced(K) or imbalanced(K, p1), got `{v}`"));
    let (name, args) = call_form(v).ok_or_else(bad)?;
    match (name, args.as_slice()) {
        ("balanced", [k]) => Ok(DistSpec::Balanced(parse_num(line, "dist", k)?)),
        ("imbalanced", [k, p1]) => Ok(DistSpec::Imbalanced(
            parse_num(line, "dist", k)?,
            parse_num(line, "dist", p1)?,
        )),
        _ => Err(bad()),
    }
}

fn parse_estimator(line: usize, v: &str) -> Result<Estimator> {
    let bad = || cfg_err(line, format!("`estimator`: unknown value `{v}`"));
    let (name, args) = call_form(v).ok_or_else(bad)?;
    match (name, args.as_slice()) {
        ("auto", []) => Ok(Estimator::Auto),
        ("exact", []) => Ok(Estimator::Exact),
        ("mc" | "monte_carlo", []) => Ok(Estimator::MonteCarlo {
            samples: crate::gradient::DEFAULT_MC_SAMPLES,
        }),
        ("mc" | "monte_carlo", [s]) => Ok(Estimator::MonteCarlo {
            samples: parse_num::<f64>(line, "estimator", s)? as usize,
        }),
        ("truncated", [p]) => Ok(Estimator::Truncated {
            min_prob: parse_num(line, "estimator", p)?,
        }),
        _ => Err(bad()),
    }
}

fn set_threshold(th: &mut PhaseThresholds, line: usize, name: &str, v: &str) -> Result<()> {
    let x: f64 = parse_num(line, name, v)?;
    match name {
        "log_k" => th.log_k = Some(x),
        "c" => th.c = Some(x),
        "balanced_a" => th.balanced_a = x,
        "balanced_sqrt" => th.balanced_sqrt = x,
        "balanced_loss_fraction" => th.balanced_loss_fraction = x,
        "imbalanced_b1" => th.imbalanced_b1 = x,
        "imbalanced_gap" => th.imbalanced_gap = x,
        "imbalanced_a" => th.imbalanced_a = x,
        "imbalanced_exponent" => th.imbalanced_exponent = x,
        "imbalanced_sqrt" => th.imbalanced_sqrt = x,
        "dominant_sqrt" => th.dominant_sqrt = x,
        _ => return Err(cfg_err(line, format!("unknown threshold `{name}`"))),
    }
    Ok(())
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| cfg_err(line, format!("expected `key = value`, got `{body}`")))?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(cfg_err(line, "empty key"));
            }
            if let Some((first, _)) = values.get(&key) {
                return Err(cfg_err(line, format!("duplicate key `{key}` (first on line {first})")));
            }
            values.insert(key, (line, value.trim().to_string()));
        }
        let end = text.lines().count() + 1;
        let get = |k: &str| values.get(k).map(|(l, v)| (*l, v.as_str()));

        let ratio_bound = match get("ratio_bound") {
            Some((l, v)) => parse_num(l, "ratio_bound", v)?,
            None => DEFAULT_BALANCED_RATIO,
        };
        let dist_spec = match (get("dist"), get("p")) {
            (Some((l, _)), Some(_)) => return Err(cfg_err(l, "give either `dist` or `p`, not both")),
            (Some((l, v)), None) => parse_dist(l, v)?,
            (None, Some((l, v))) => {
                let regime = match get("regime") {
                    None | Some((_, "custom")) => Regime::Custom,
                    Some((_, "balanced")) => Regime::Balanced,
                    Some((_, "imbalanced")) => Regime::Imbalanced,
                    Some((rl, other)) => return Err(cfg_err(rl, format!("unknown regime `{other}`"))),
                };
                DistSpec::Explicit(parse_list(l, "p", v)?, regime)
            }
            (None, None) => {
                return Err(cfg_err(end, "missing probability vector: set `p` or `dist`"));
            }
        };
        let dist_line = get("dist").or(get("p")).map(|(l, _)| l).unwrap_or(end);
        let dist = dist_spec
            .build(ratio_bound)
            .map_err(|e| cfg_err(dist_line, e.to_string()))?;

        let (n_line, n) = match get("N") {
            Some((l, v)) => (l, parse_num::<usize>(l, "N", v)?),
            None if get("sweep.n_per_k2").is_some() => (end, 1),
            None => return Err(cfg_err(end, "missing required key `N`")),
        };
        let eta = match get("eta") {
            Some((l, v)) => parse_num(l, "eta", v)?,
            None => return Err(cfg_err(end, "missing required key `eta`")),
        };
        let max_iters = match get("max_iters") {
            Some((l, v)) => parse_num(l, "max_iters", v)?,
            None => 1000,
        };
        let mut train = TrainConfig::new(dist, n, eta, max_iters);
        for (key, (l, v)) in &values {
            let (l, v) = (*l, v.as_str());
            match key.as_str() {
                "dist" | "p" | "regime" | "ratio_bound" | "N" | "eta" | "max_iters" => {}
                "d" => train.d = parse_num(l, key, v)?,
                "estimator" => train.estimator = parse_estimator(l, v)?,
                "budget" => train.budget = parse_num::<f64>(l, key, v)? as usize,
                "mode" => {
                    train.mode = match v {
                        "reduced" => TrainMode::Reduced,
                        "full" => TrainMode::Full,
                        "both" => TrainMode::Both,
                        _ => return Err(cfg_err(l, format!("unknown mode `{v}`"))),
                    }
                }
                "record_every" => train.record_every = parse_num(l, key, v)?,
                "seed" => train.seed = parse_num(l, key, v)?,
                "epsilon" => train.epsilon = parse_num(l, key, v)?,
                "c" => train.event_c = Some(parse_num(l, key, v)?),
                "stop" => {
                    train.stop = match v {
                        "auto" => StopRule::Auto,
                        "never" => StopRule::Never,
                        "total_gap" => StopRule::TotalGap,
                        "conditional_gap" => StopRule::ConditionalGap,
                        "phase_one" => StopRule::PhaseOne,
                        _ => return Err(cfg_err(l, format!("unknown stop rule `{v}`"))),
                    }
                }
                "basis" => {
                    train.basis = match v {
                        "identity" => BasisMode::Identity,
                        "random" | "random_orthonormal" => BasisMode::RandomOrthonormal,
                        _ => return Err(cfg_err(l, format!("unknown basis `{v}`"))),
                    }
                }
                "output_dir" | "emit" | "sweep.K" | "sweep.eta" | "sweep.n_per_k2" => {}
                k if k.starts_with("threshold.") => {}
                _ => return Err(cfg_err(l, format!("unknown key `{key}`"))),
            }
        }
        if get("d").is_none() {
            train.d = train.num_features();
        }
        if get("record_every").is_none() {
            train.record_every = crate::trainer::default_record_every(max_iters);
        }
        train.validate().map_err(|e| cfg_err(n_line, e.to_string()))?;

        let mut emit = Emit::default();
        if let Some((l, v)) = get("emit") {
            emit = Emit {
                trajectory_csv: false,
                phase_json: false,
                loss_json: false,
                plotdata: false,
            };
            for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                match item {
                    "trajectory_csv" => emit.trajectory_csv = true,
                    "phase_json" => emit.phase_json = true,
                    "loss_json" => emit.loss_json = true,
                    "plotdata" => emit.plotdata = true,
                    _ => return Err(cfg_err(l, format!("unknown artifact `{item}`"))),
                }
            }
            if emit == (Emit { trajectory_csv: false, phase_json: false, loss_json: false, plotdata: false }) {
                return Err(cfg_err(l, "`emit` must name at least one artifact"));
            }
        }
        let mut thresholds = PhaseThresholds::default();
        for (key, (l, v)) in &values {
            if let Some(name) = key.strip_prefix("threshold.") {
                set_threshold(&mut thresholds, *l, name, v)?;
            }
        }
        let sweep_k = match get("sweep.K") {
            Some((l, v)) => {
                let ks: Vec<usize> = parse_list(l, "sweep.K", v)?;
                if ks.is_empty() {
                    return Err(cfg_err(l, "`sweep.K` is empty"));
                }
                if dist_spec.with_k(2).is_none() {
                    return Err(cfg_err(l, "`sweep.K` needs `dist = balanced(..)` or `imbalanced(..)`"));
                }
                ks
            }
            None => Vec::new(),
        };
        let sweep_eta = match get("sweep.eta") {
            Some((l, v)) => {
                let etas: Vec<f64> = parse_list(l, "sweep.eta", v)?;
                if etas.is_empty() {
                    return Err(cfg_err(l, "`sweep.eta` is empty"));
                }
                etas
            }
            None => Vec::new(),
        };
        let sweep_n_per_k2 = match get("sweep.n_per_k2") {
            Some((l, v)) => Some(parse_num(l, "sweep.n_per_k2", v)?),
            None => None,
        };
        if n_line == end && sweep_n_per_k2.is_some() && sweep_k.is_empty() {
            return Err(cfg_err(end, "missing required key `N`"));
        }
        Ok(RunConfig {
            dist: dist_spec,
            ratio_bound,
            train,
            output_dir: PathBuf::from(get("output_dir").map_or("icl-lab-out", |(_, v)| v)),
            emit,
            thresholds,
            sweep_k,
            sweep_eta,
            sweep_n_per_k2,
        })
    }
}

/// Detector for the distribution's regime (balanced detector for custom).
pub fn detect_phases(
    record: &TrajectoryRecord,
    dist: &TokenDistribution,
    th: &PhaseThresholds,
) -> Result<PhaseReport> {
    match dist.regime() {
        Regime::Imbalanced => detect_phases_imbalanced(record, dist, record.num_tokens, record.epsilon, th),
        _ => detect_phases_balanced(record, dist, record.num_tokens, record.epsilon, th),
    }
}

/// `t,A_1..A_K,B_k_n (k != n, row-major),alpha_1..alpha_K,loss_total,loss_gap,estimator`.
pub fn trajectory_csv(record: &TrajectoryRecord) -> String {
    let k = record.num_features;
    let mut out = String::from("t");
    for j in 1..=k {
        write!(out, ",A_{j}").unwrap();
    }
    for j in 1..=k {
        for n in 1..=k {
            if j != n {
                write!(out, ",B_{j}_{n}").unwrap();
            }
        }
    }
    for j in 1..=k {
        write!(out, ",alpha_{j}").unwrap();
    }
    out.push_str(",loss_total,loss_gap,estimator\n");
    for s in &record.snapshots {
        write!(out, "{}", s.t).unwrap();
        for j in 0..k {
            write!(out, ",{}", fmt_f64(s.weights.a(j))).unwrap();
        }
        for j in 0..k {
            for n in 0..k {
                if j != n {
                    write!(out, ",{}", fmt_f64(s.weights.b(j, n))).unwrap();
                }
            }
        }
        for a in &s.alpha {
            write!(out, ",{}", fmt_f64(*a)).unwrap();
        }
        writeln!(
            out,
            ",{},{},{}",
            fmt_f64(s.loss.total),
            fmt_f64(s.gap),
            record.estimator.name()
        )
        .unwrap();
    }
    out
}

fn plot_file(points: impl Iterator<Item = (usize, f64)>) -> String {
    let mut out = String::new();
    for (t, y) in points {
        writeln!(out, "{t} {}", fmt_f64(y)).unwrap();
    }
    out
}

#[derive(Debug, Clone, Serialize)]
struct LossArtifact<'a> {
    config: &'a TrainConfig,
    stop_rule: StopRule,
    stopped_at: Option<usize>,
    horizon: usize,
    estimator: &'static str,
    samples: Option<usize>,
    initial: &'a LossReport,
    last: &'a LossReport,
    last_gap: f64,
    aborted: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub stopped_at: Option<usize>,
    pub horizon: usize,
    pub final_gap: f64,
}

fn write_artifacts(
    cfg: &RunConfig,
    record: &TrajectoryRecord,
    dist: &TokenDistribution,
    aborted: Option<String>,
) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, body)?;
        files.push(path);
        Ok(())
    };
    if cfg.emit.trajectory_csv {
        put("trajectory.csv", trajectory_csv(record))?;
    }
    if cfg.emit.phase_json {
        let phases = detect_phases(record, dist, &cfg.thresholds)?;
        put("phases.json", to_json(&phases).map_err(json_err)?)?;
    }
    if cfg.emit.loss_json {
        let art = LossArtifact {
            config: &cfg.train,
            stop_rule: record.stop_rule,
            stopped_at: record.stopped_at,
            horizon: record.horizon,
            estimator: record.estimator.name(),
            samples: record.samples,
            initial: &record.first().loss,
            last: &record.last().loss,
            last_gap: record.last().gap,
            aborted,
        };
        put("loss.json", to_json(&art).map_err(json_err)?)?;
    }
    if cfg.emit.plotdata {
        let k = record.num_features;
        let snaps = &record.snapshots;
        for j in 0..k {
            put(
                &format!("plotdata/A_{}.dat", j + 1),
                plot_file(snaps.iter().map(|s| (s.t, s.weights.a(j)))),
            )?;
            put(
                &format!("plotdata/loss_{}.dat", j + 1),
                plot_file(snaps.iter().map(|s| (s.t, s.loss.per_feature[j]))),
            )?;
        }
        put("plotdata/gap.dat", plot_file(snaps.iter().map(|s| (s.t, s.gap))))?;
    }
    Ok(files)
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Runs the configured training, writes the requested artifacts and returns
/// a summary. A numeric abort still writes artifacts for the partial record
/// before the error is returned.
pub fn simulate(cfg: &RunConfig) -> Result<SimulateSummary> {
    let dist = cfg.train.dist.clone();
    match gd_run(&cfg.train) {
        Ok(record) => {
            let files = write_artifacts(cfg, &record, &dist, None)?;
            Ok(SimulateSummary {
                output_dir: cfg.output_dir.clone(),
                files,
                stopped_at: record.stopped_at,
                horizon: record.horizon,
                final_gap: record.last().gap,
            })
        }
        Err(Error::NumericAbort { t, reason, record }) => {
            if !record.snapshots.is_empty() {
                write_artifacts(cfg, &record, &dist, Some(reason.clone()))?;
            }
            Err(Error::NumericAbort { t, reason, record })
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Bounds,
    Events,
    Closure,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(Suite::Gradients),
            "bounds" => Ok(Suite::Bounds),
            "events" => Ok(Suite::Events),
            "closure" => Ok(Suite::Closure),
            "all" => Ok(Suite::All),
            _ => Err(Error::InvalidArgument(format!("unknown suite `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    /// `observed <= tolerance` passes unless `lower_is_better` is false, in
    /// which case `observed >= tolerance` passes.
    pub tolerance: f64,
    pub observed: f64,
    pub lower_is_better: bool,
    pub pass: bool,
}

impl Check {
    fn at_most(suite: &'static str, name: impl Into<String>, observed: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            tolerance,
            observed,
            lower_is_better: true,
            pass: observed <= tolerance,
        }
    }

    fn at_least(suite: &'static str, name: impl Into<String>, observed: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            tolerance,
            observed,
            lower_is_better: false,
            pass: observed >= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub passed: bool,
}

fn random_weights<R: Rng>(k: usize, scale: f64, rng: &mut R) -> ReducedWeights {
    ReducedWeights::from_matrix(nalgebra::DMatrix::from_fn(k, k, |_, _| {
        rng.gen_range(-scale..=scale)
    }))
    .expect("square")
}

fn verify_gradients() -> Result<Vec<Check>> {
    const S: &str = "gradients";
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.gen_range(2..=5);
        let n = rng.gen_range(1..=40);
        let dist = TokenDistribution::balanced(k)?;
        let counts = PromptCounts::new(draw_multinomial(dist.probs(), n, &mut rng))?;
        let m = random_weights(k, 2.0, &mut rng);
        let q = rng.gen_range(0..k);
        worst = worst.max(finite_diff_check(&counts, q, &m, 1e-5)?.max_rel_err);
    }
    let mut checks = vec![Check::at_most(S, "finite-difference max relative error", worst, 1e-6)];

    let dist = TokenDistribution::balanced(2)?;
    let g = crate::gradient::population_gradient_exact(&dist, 2, &ReducedWeights::zeros(2))?;
    let err = [
        (g.alpha[0] - 1.0 / 16.0).abs(),
        (g.alpha[1] - 1.0 / 16.0).abs(),
        (g.beta[(0, 1)] + 1.0 / 16.0).abs(),
        (g.beta[(1, 0)] + 1.0 / 16.0).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    checks.push(Check::at_most(S, "exact gradient at K=2, N=2, M=0", err, 1e-15));

    let dist = TokenDistribution::new(vec![0.5, 0.3, 0.2], Regime::Custom)?;
    let table = CountTable::exact(&dist, 8, DEFAULT_ENUMERATION_BUDGET)?;
    let basis = FeatureBasis::build(5, 3, 4, BasisMode::RandomOrthonormal)?;
    let mut worst_red: f64 = 0.0;
    for _ in 0..5 {
        let m = random_weights(3, 2.0, &mut rng);
        let reduced = evaluate_table(&table, &dist, &m, None).gradient.ascent_matrix();
        let full = full_q_gradient_table(&table, &dist, &crate::attention::lift(&m, &basis), &basis)?;
        let projected = reduce(&(-full), &basis);
        worst_red = worst_red.max((projected.matrix() - reduced).amax());
    }
    checks.push(Check::at_most(S, "reduce(-full gradient) vs (alpha, beta)", worst_red, 1e-12));

    let dist = TokenDistribution::balanced(3)?;
    let table = CountTable::exact(&dist, 12, DEFAULT_ENUMERATION_BUDGET)?;
    let mut worst_z: f64 = 0.0;
    for i in 0..3 {
        let m = random_weights(3, 2.0, &mut rng);
        let exact = evaluate_table(&table, &dist, &m, None).gradient;
        let mc = evaluate_mc(&dist, 12, &m, 200_000, 100 + i, None)?.gradient;
        let se = mc.std_err.as_ref().expect("monte carlo reports errors");
        for q in 0..3 {
            worst_z = worst_z.max((mc.alpha[q] - exact.alpha[q]).abs() / se.alpha[q]);
            for n in 0..3 {
                if n != q {
                    worst_z = worst_z.max((mc.beta[(q, n)] - exact.beta[(q, n)]).abs() / se.beta[(q, n)]);
                }
            }
        }
    }
    checks.push(Check::at_most(S, "Monte Carlo vs exact, max |z|", worst_z, 4.0));
    Ok(checks)
}

/// Event constant that keeps every lower interval constant positive.
pub fn positive_event_constant(dist: &TokenDistribution) -> f64 {
    let probe = event_constants(dist, 1.0);
    // lower = base - slope * c for each feature; take half the smallest root.
    let k = dist.num_features() as f64;
    let mut limit = f64::INFINITY;
    for j in 0..dist.num_features() {
        let (base, slope) = if j == 0 && dist.regime() == Regime::Imbalanced {
            (dist.prob(0), dist.prob(0) - probe.lower[0])
        } else {
            (dist.prob(j) * k, 1.0)
        };
        limit = limit.min(base / slope);
    }
    0.5 * limit
}

fn verify_bounds() -> Result<Vec<Check>> {
    const S: &str = "bounds";
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checks = Vec::new();
    for dist in [
        TokenDistribution::balanced(3)?,
        TokenDistribution::imbalanced(3, 0.5)?,
    ] {
        let n = 24;
        let c = positive_event_constant(&dist);
        let table = CountTable::exact(&dist, n, DEFAULT_ENUMERATION_BUDGET)?;
        let intervals = event_intervals(&dist, n, c);
        let (mut lo, mut hi, mut lower_gap) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
        for _ in 0..40 {
            let m = random_weights(3, 3.0, &mut rng);
            let e = evaluate_table(&table, &dist, &m, Some(&intervals));
            let rep = LossReport::from_evaluation(&dist, n, c, &e);
            let slack = if dist.regime() == Regime::Imbalanced {
                rep.conditional_sandwich_slack()
            } else {
                rep.sandwich_slack(&dist)
            }
            .expect("K > 1");
            for (a, b) in slack {
                lo = lo.min(a);
                hi = hi.min(b);
            }
            lower_gap = lower_gap.min(rep.gap());
        }
        let r = dist.regime().name();
        checks.push(Check::at_least(S, format!("{r}: sandwich lower slack"), lo, -1e-12));
        checks.push(Check::at_least(S, format!("{r}: sandwich upper slack"), hi, -1e-12));
        checks.push(Check::at_least(S, format!("{r}: L - Llow"), lower_gap, 0.0));
    }
    Ok(checks)
}

/// Fraction of `samples` draws outside the event with constant `c`.
pub fn empirical_miss_rate(dist: &TokenDistribution, n: usize, c: f64, samples: usize, seed: u64) -> f64 {
    let intervals = event_intervals(dist, n, c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let misses = (0..samples)
        .filter(|_| !in_event(&draw_multinomial(dist.probs(), n as u64, &mut rng), &intervals))
        .count();
    misses as f64 / samples as f64
}

fn verify_events() -> Result<Vec<Check>> {
    const S: &str = "events";
    let mut checks = Vec::new();
    for (k, n) in [(3usize, 512usize), (4, 1024)] {
        for dist in [TokenDistribution::balanced(k)?, TokenDistribution::imbalanced(k, 0.5)?] {
            let c = default_event_constant(k, n);
            let rate = empirical_miss_rate(&dist, n, c, 100_000, 13);
            let bound = multinomial_tail_bound(n, k, c);
            checks.push(Check::at_most(
                S,
                format!("{} K={k} N={n}: miss rate vs tail bound", dist.regime().name()),
                rate,
                bound,
            ));
        }
    }
    Ok(checks)
}

fn verify_closure() -> Result<Vec<Check>> {
    const S: &str = "closure";
    let mut checks = Vec::new();
    for (d, basis, label) in [
        (3, BasisMode::Identity, "identity"),
        (6, BasisMode::RandomOrthonormal, "random"),
    ] {
        let mut cfg = TrainConfig::new(TokenDistribution::balanced(3)?, 12, 2.0, 200);
        cfg.d = d;
        cfg.basis = basis;
        cfg.seed = 5;
        cfg.estimator = Estimator::Exact;
        cfg.stop = StopRule::Never;
        let run = dual_mode_run(&cfg)?;
        checks.push(Check::at_most(S, format!("dual-mode divergence, {label} basis d={d}"), run.divergence, 1e-10));
    }
    Ok(checks)
}

pub fn verify(suite: Suite) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Gradients | Suite::All) {
        checks.extend(verify_gradients()?);
    }
    if matches!(suite, Suite::Bounds | Suite::All) {
        checks.extend(verify_bounds()?);
    }
    if matches!(suite, Suite::Events | Suite::All) {
        checks.extend(verify_events()?);
    }
    if matches!(suite, Suite::Closure | Suite::All) {
        checks.extend(verify_closure()?);
    }
    let passed = checks.iter().all(|c| c.pass);
    Ok(VerifyReport { checks, passed })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub n: usize,
    pub eta: f64,
    pub status: String,
    /// Phase-I boundary (`T1` per feature) min and max over features.
    pub t1_min: Option<usize>,
    pub t1_max: Option<usize>,
    pub t1_completed: bool,
    pub stopped_at: Option<usize>,
    pub horizon: Option<usize>,
    pub final_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of `log T1_max` against `log K`.
    pub slope_k: Option<f64>,
    /// Least-squares slope of `log T1_max` against `log eta`.
    pub slope_eta: Option<f64>,
}

fn slope(points: &[(f64, f64)]) -> Option<f64> {
    let distinct = points.iter().any(|p| (p.0 - points[0].0).abs() > 0.0);
    if points.len() < 2 || !distinct {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(sxy / sxx)
}

fn sweep_point(cfg: &RunConfig, k: usize, eta: f64) -> SweepRow {
    let n = match cfg.sweep_n_per_k2 {
        Some(s) => (s * (k * k) as f64).round() as usize,
        None => cfg.train.n,
    };
    let mut row = SweepRow {
        k,
        n,
        eta,
        status: "ok".into(),
        t1_min: None,
        t1_max: None,
        t1_completed: false,
        stopped_at: None,
        horizon: None,
        final_gap: None,
    };
    let result = (|| -> Result<()> {
        let spec = cfg.dist.with_k(k).unwrap_or_else(|| cfg.dist.clone());
        let dist = spec.build(cfg.ratio_bound)?;
        let mut train = cfg.train.clone();
        train.dist = dist.clone();
        train.n = n;
        train.eta = eta;
        train.d = train.d.max(k);
        let record = gd_run(&train)?;
        let phases = detect_phases(&record, &dist, &cfg.thresholds)?;
        let t1: Vec<&crate::analysis::Boundary> = phases
            .features
            .iter()
            .filter_map(|f| f.get("T1"))
            .collect();
        row.t1_min = t1.iter().filter_map(|b| b.t).min();
        row.t1_max = t1.iter().filter_map(|b| b.t).max();
        row.t1_completed = !t1.is_empty() && t1.iter().all(|b| b.completed);
        row.stopped_at = record.stopped_at;
        row.horizon = Some(record.horizon);
        row.final_gap = Some(record.last().gap);
        Ok(())
    })();
    if let Err(e) = result {
        row.status = format!("error: {e}");
    }
    row
}

pub fn sweep(cfg: &RunConfig) -> Result<SweepReport> {
    if cfg.sweep_k.is_empty() && cfg.sweep_eta.is_empty() {
        return Err(Error::InvalidArgument("sweep needs `sweep.K` or `sweep.eta`".into()));
    }
    let ks = if cfg.sweep_k.is_empty() {
        vec![cfg.train.num_features()]
    } else {
        cfg.sweep_k.clone()
    };
    let etas = if cfg.sweep_eta.is_empty() {
        vec![cfg.train.eta]
    } else {
        cfg.sweep_eta.clone()
    };
    let points: Vec<(usize, f64)> = ks
        .iter()
        .flat_map(|&k| etas.iter().map(move |&e| (k, e)))
        .collect();
    let rows: Vec<SweepRow> = points
        .par_iter()
        .map(|&(k, eta)| sweep_point(cfg, k, eta))
        .collect();
    let usable = |r: &&SweepRow| r.status == "ok" && r.t1_completed && r.t1_max.map_or(false, |t| t > 0);
    let slope_k = (etas.len() == 1)
        .then(|| {
            slope(
                &rows
                    .iter()
                    .filter(usable)
                    .map(|r| ((r.k as f64).ln(), (r.t1_max.unwrap() as f64).ln()))
                    .collect::<Vec<_>>(),
            )
        })
        .flatten();
    let slope_eta = (ks.len() == 1)
        .then(|| {
            slope(
                &rows
                    .iter()
                    .filter(usable)
                    .map(|r| (r.eta.ln(), (r.t1_max.unwrap() as f64).ln()))
                    .collect::<Vec<_>>(),
            )
        })
        .flatten();
    Ok(SweepReport {
        rows,
        slope_k,
        slope_eta,
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = String::from("K,N,eta,status,T1_min,T1_max,T1_completed,stopped_at,horizon,final_gap\n");
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.k,
            r.n,
            fmt_f64(r.eta),
            r.status.replace(',', ";"),
            opt(r.t1_min),
            opt(r.t1_max),
            r.t1_completed,
            opt(r.stopped_at),
            opt(r.horizon),
            r.final_gap.map(fmt_f64).unwrap_or_default(),
        )
        .unwrap();
    }
    out
}

/// Runs the sweep and writes `sweep.csv` and `sweep.json` under the output
/// directory.
pub fn run_sweep(cfg: &RunConfig) -> Result<SweepReport> {
    let report = sweep(cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("sweep.csv"), sweep_csv(&report))?;
    fs::write(cfg.output_dir.join("sweep.json"), to_json(&report).map_err(json_err)?)?;
    Ok(report)
}

/// Plain-text summary of a `simulate` output directory.
pub fn report(dir: &Path) -> Result<String> {
    let read = |name: &str| -> Result<Option<serde_json::Value>> {
        let path = dir.join(name);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    };
    let loss = read("loss.json")?;
    let phases = read("phases.json")?;
    if loss.is_none() && phases.is_none() {
        return Err(Error::InvalidArgument(format!(
            "{} holds neither loss.json nor phases.json",
            dir.display()
        )));
    }
    let mut out = String::new();
    if let Some(l) = &loss {
        writeln!(out, "estimator: {}", l["estimator"].as_str().unwrap_or("?")).unwrap();
        writeln!(out, "horizon: {}", l["horizon"]).unwrap();
        match l["stopped_at"].as_u64() {
            Some(t) => writeln!(out, "stopped at t={t} ({})", l["stop_rule"].as_str().unwrap_or("?")).unwrap(),
            None => writeln!(out, "stop rule did not fire").unwrap(),
        }
        writeln!(out, "initial loss: {}", l["initial"]["total"]).unwrap();
        writeln!(out, "final loss: {}", l["last"]["total"]).unwrap();
        writeln!(out, "final gap: {}", l["last_gap"]).unwrap();
        if let Some(a) = l["aborted"].as_str() {
            writeln!(out, "aborted: {a}").unwrap();
        }
    }
    if let Some(p) = &phases {
        writeln!(out, "regime: {}", p["regime"].as_str().unwrap_or("?")).unwrap();
        for f in p["features"].as_array().into_iter().flatten() {
            let mut line = format!("feature {}:", f["feature"]);
            for b in f["boundaries"].as_array().into_iter().flatten() {
                let t = b["t"].as_u64().map_or("-".to_string(), |t| t.to_string());
                let mark = if b["completed"].as_bool() == Some(true) { "" } else { "?" };
                let amb = if b["ambiguous"].as_bool() == Some(true) { "~" } else { "" };
                write!(line, " {}={t}{mark}{amb}", b["name"].as_str().unwrap_or("?")).unwrap();
            }
            writeln!(out, "{line}").unwrap();
        }
    }
    Ok(out)
}

/// Loss report at the origin for a config, for quick inspection.
pub fn initial_loss(cfg: &RunConfig) -> Result<LossReport> {
    let k = cfg.train.num_features();
    loss_report(&cfg.train.dist, cfg.train.n, &ReducedWeights::zeros(k), cfg.train.event_constant())
}
