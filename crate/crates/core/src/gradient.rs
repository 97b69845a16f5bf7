//! Population gradients of the squared loss with respect to the bilinear
//! attention weights.
//!
//! The task vector is integrated out analytically (`E[w w^T] = I`) and so is
//! the query feature (weights `p_k`), which leaves an expectation over count
//! vectors only. That expectation is either summed exactly over a
//! [`CountTable`] or estimated by Monte Carlo.
//!
//! For query feature `k` and a count vector with profile `Attn`:
//!
//! ```text
//! loss   = 1/2 [ (1 - Attn_k)^2 + sum_{m != k} Attn_m^2 ]
//! a      = Attn_k [ sum_{m != k} Attn_m^2 + (1 - Attn_k)^2 ]
//! b_n    = Attn_n [ sum_{m != k} Attn_m^2 - Attn_n - Attn_k (1 - Attn_k) ]
//! alpha_k  = p_k E[a],   beta_{k,n} = p_k E[b_n]
//! ```
//!
//! `alpha_k` and `beta_{k,n}` are the negative gradient of the loss along
//! `v_k v_k^T` and `v_n v_k^T`, so gradient descent adds `eta * alpha` to
//! `A_k` and `eta * beta` to `B_{k,n}`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{attention_profile, log_space_profile, ReducedWeights};
use crate::error::{Error, Result};
use crate::features::{
    draw_multinomial, in_event, CountTable, FeatureBasis, PromptCounts, TokenDistribution,
    DEFAULT_ENUMERATION_BUDGET,
};
use crate::report::serialize_matrix;

/// Default Monte Carlo sample count when enumeration does not fit.
pub const DEFAULT_MC_SAMPLES: usize = 100_000;

const TABLE_CHUNK: usize = 4096;
const MC_BLOCK: usize = 1024;

/// How population expectations over count vectors are computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Estimator {
    /// Exact enumeration if it fits the budget, Monte Carlo otherwise.
    Auto,
    Exact,
    /// Enumeration of count vectors with probability `>= min_prob`.
    Truncated { min_prob: f64 },
    MonteCarlo { samples: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Exact,
    Truncated,
    MonteCarlo,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Exact => "exact",
            EstimatorKind::Truncated => "truncated",
            EstimatorKind::MonteCarlo => "monte_carlo",
        }
    }
}

/// Standard errors of a Monte Carlo gradient, laid out like the estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientStdErr {
    pub alpha: Vec<f64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub beta: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    pub alpha: Vec<f64>,
    /// `beta[(k, n)] = beta_{k,n}`; the diagonal is zero.
    #[serde(serialize_with = "serialize_matrix")]
    pub beta: DMatrix<f64>,
    pub estimator: EstimatorKind,
    pub samples: Option<usize>,
    pub std_err: Option<GradientStdErr>,
    /// Probability mass left out by a truncated table.
    pub dropped_mass: f64,
    #[serde(serialize_with = "crate::report::serialize_opt_matrix")]
    pub full_grad: Option<DMatrix<f64>>,
}

impl GradientReport {
    pub fn num_features(&self) -> usize {
        self.alpha.len()
    }

    /// `-dL/dM` in the layout of [`ReducedWeights`]: `alpha_k` on the
    /// diagonal, `beta_{k,n}` at `(n, k)`.
    pub fn ascent_matrix(&self) -> DMatrix<f64> {
        let k = self.num_features();
        DMatrix::from_fn(k, k, |n, q| {
            if n == q {
                self.alpha[q]
            } else {
                self.beta[(q, n)]
            }
        })
    }
}

/// Per-count-vector integrands for one query feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Integrands {
    pub a: f64,
    /// `b[n]` for `n != k`; `b[k] = 0`.
    pub b: Vec<f64>,
}

pub fn per_count_loss(counts: &PromptCounts, query: usize, weights: &ReducedWeights) -> Result<f64> {
    let prof = attention_profile(counts, query, weights)?;
    Ok(loss_from_profile(&prof.scores, query))
}

pub fn per_count_integrands(
    counts: &PromptCounts,
    query: usize,
    weights: &ReducedWeights,
) -> Result<Integrands> {
    let prof = attention_profile(counts, query, weights)?;
    let s = &prof.scores;
    let ak = s[query];
    let sq = off_query_square_sum(s, query);
    let a = ak * (sq + (1.0 - ak) * (1.0 - ak));
    let b = (0..s.len())
        .map(|n| {
            if n == query {
                0.0
            } else {
                s[n] * (sq - s[n] - ak * (1.0 - ak))
            }
        })
        .collect();
    Ok(Integrands { a, b })
}

fn off_query_square_sum(scores: &[f64], query: usize) -> f64 {
    scores
        .iter()
        .enumerate()
        .filter(|&(m, _)| m != query)
        .map(|(_, s)| s * s)
        .sum()
}

pub(crate) fn loss_from_profile(scores: &[f64], query: usize) -> f64 {
    let miss = 1.0 - scores[query];
    0.5 * (miss * miss + off_query_square_sum(scores, query))
}

/// Precomputed softmax factors for a fixed weight matrix. Values per count
/// vector are laid out as
/// `[ascent (K*K, column-major (n,k)) | loss_k (K) | event loss_k (K)]`.
pub(crate) struct Kernel {
    k: usize,
    logits: Vec<f64>,
    scaled: Vec<f64>,
}

impl Kernel {
    pub(crate) fn new(weights: &ReducedWeights) -> Self {
        let k = weights.num_features();
        let logits: Vec<f64> = weights.matrix().as_slice().to_vec();
        let mut scaled = logits.clone();
        for q in 0..k {
            let col = &mut scaled[q * k..(q + 1) * k];
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for x in col.iter_mut() {
                *x = (*x - max).exp();
            }
        }
        Self { k, logits, scaled }
    }

    pub(crate) fn width(&self) -> usize {
        self.k * self.k + 2 * self.k
    }

    /// `Attn` for query `q` into `out`.
    #[inline]
    pub(crate) fn profile<C: Copy + Into<u64>>(&self, counts: &[C], q: usize, out: &mut [f64]) {
        let w = &self.scaled[q * self.k..(q + 1) * self.k];
        let mut total = 0.0;
        for m in 0..self.k {
            let c: u64 = counts[m].into();
            out[m] = c as f64 * w[m];
            total += out[m];
        }
        if total > 1e-280 && total.is_finite() {
            let inv = 1.0 / total;
            for x in out.iter_mut() {
                *x *= inv;
            }
        } else {
            log_space_profile(counts, &self.logits[q * self.k..(q + 1) * self.k], out);
        }
    }

    /// Writes per-count-vector values (without the `p_k` factor) into `out`.
    pub(crate) fn values<C: Copy + Into<u64>>(
        &self,
        counts: &[C],
        member: bool,
        scratch: &mut [f64],
        out: &mut [f64],
    ) {
        let k = self.k;
        for q in 0..k {
            self.profile(counts, q, scratch);
            let ak = scratch[q];
            let miss = 1.0 - ak;
            let sq = off_query_square_sum(scratch, q);
            let col = &mut out[q * k..(q + 1) * k];
            let shared = sq - ak * miss;
            for n in 0..k {
                col[n] = if n == q {
                    ak * (sq + miss * miss)
                } else {
                    scratch[n] * (shared - scratch[n])
                };
            }
            let loss = 0.5 * (miss * miss + sq);
            out[k * k + q] = loss;
            out[k * k + k + q] = if member { loss } else { 0.0 };
        }
    }
}

/// Population expectations at one weight matrix: the gradient and the per
/// feature loss terms `L_k = p_k E[loss]` (all prompts and event-restricted).
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub gradient: GradientReport,
    pub loss: Vec<f64>,
    pub event_loss: Vec<f64>,
    pub loss_std_err: Option<Vec<f64>>,
}

fn pairwise_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity((parts.len() + 1) / 2);
        let mut it = parts.into_iter();
        while let Some(mut left) = it.next() {
            if let Some(right) = it.next() {
                for (l, r) in left.iter_mut().zip(right) {
                    *l += r;
                }
            }
            next.push(left);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

/// Exact (or truncated) expectations over a count table. `intervals` selects
/// the event used for the restricted loss; `None` leaves it empty.
pub fn evaluate_table(
    table: &CountTable,
    dist: &TokenDistribution,
    weights: &ReducedWeights,
    intervals: Option<&[(f64, f64)]>,
) -> Evaluation {
    let kernel = Kernel::new(weights);
    let k = table.num_features();
    let width = kernel.width();
    let parts: Vec<Vec<f64>> = table
        .probs()
        .par_chunks(TABLE_CHUNK)
        .zip(table.raw_counts().par_chunks(TABLE_CHUNK * k))
        .map(|(probs, counts)| {
            let mut acc = vec![0.0; width];
            let mut vals = vec![0.0; width];
            let mut scratch = vec![0.0; k];
            for (c, &p) in counts.chunks_exact(k).zip(probs) {
                let member = intervals.map_or(false, |iv| in_event(c, iv));
                kernel.values(c, member, &mut scratch, &mut vals);
                for (a, v) in acc.iter_mut().zip(&vals) {
                    *a += p * v;
                }
            }
            acc
        })
        .collect();
    let sums = pairwise_sum(parts);
    let kind = if table.is_exact() {
        EstimatorKind::Exact
    } else {
        EstimatorKind::Truncated
    };
    assemble(dist, &sums, None, kind, None, table.dropped_mass())
}

#[derive(Clone)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(width: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for i in 0..x.len() {
            let delta = x[i] - self.mean[i];
            self.mean[i] += delta / self.n;
            self.m2[i] += delta * (x[i] - self.mean[i]);
        }
    }

    fn merge(self, other: Self) -> Self {
        if self.n == 0.0 {
            return other;
        }
        if other.n == 0.0 {
            return self;
        }
        let n = self.n + other.n;
        let mut mean = self.mean;
        let mut m2 = self.m2;
        for i in 0..mean.len() {
            let delta = other.mean[i] - mean[i];
            mean[i] += delta * other.n / n;
            m2[i] += other.m2[i] + delta * delta * self.n * other.n / n;
        }
        Self { n, mean, m2 }
    }
}

fn pairwise_merge(mut parts: Vec<Welford>) -> Welford {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity((parts.len() + 1) / 2);
        let mut it = parts.into_iter();
        while let Some(left) = it.next() {
            next.push(match it.next() {
                Some(right) => left.merge(right),
                None => left,
            });
        }
        parts = next;
    }
    parts.pop().expect("at least one block")
}

/// Monte Carlo expectations from `samples` count vectors. Samples are split
/// into fixed blocks, each with its own ChaCha stream derived from `seed`, and
/// reduced pairwise in block order, so the result does not depend on the
/// number of worker threads.
pub fn evaluate_mc(
    dist: &TokenDistribution,
    n: usize,
    weights: &ReducedWeights,
    samples: usize,
    seed: u64,
    intervals: Option<&[(f64, f64)]>,
) -> Result<Evaluation> {
    if samples == 0 {
        return Err(Error::InvalidArgument("Monte Carlo needs at least one sample".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    let kernel = Kernel::new(weights);
    let k = dist.num_features();
    let width = kernel.width();
    let blocks = samples.div_ceil(MC_BLOCK);
    let parts: Vec<Welford> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let len = MC_BLOCK.min(samples - b * MC_BLOCK);
            let mut acc = Welford::new(width);
            let mut vals = vec![0.0; width];
            let mut scratch = vec![0.0; k];
            for _ in 0..len {
                let c = draw_multinomial(dist.probs(), n as u64, &mut rng);
                let member = intervals.map_or(false, |iv| in_event(&c, iv));
                kernel.values(&c, member, &mut scratch, &mut vals);
                acc.push(&vals);
            }
            acc
        })
        .collect();
    let stats = pairwise_merge(parts);
    let se: Vec<f64> = if stats.n > 1.0 {
        stats
            .m2
            .iter()
            .map(|m2| (m2 / (stats.n - 1.0) / stats.n).sqrt())
            .collect()
    } else {
        vec![f64::INFINITY; width]
    };
    Ok(assemble(
        dist,
        &stats.mean,
        Some(&se),
        EstimatorKind::MonteCarlo,
        Some(samples),
        0.0,
    ))
}

fn assemble(
    dist: &TokenDistribution,
    sums: &[f64],
    se: Option<&[f64]>,
    estimator: EstimatorKind,
    samples: Option<usize>,
    dropped_mass: f64,
) -> Evaluation {
    let k = dist.num_features();
    let p = dist.probs();
    let split = |v: &[f64]| {
        let alpha: Vec<f64> = (0..k).map(|q| p[q] * v[q * k + q]).collect();
        let beta = DMatrix::from_fn(k, k, |q, n| if q == n { 0.0 } else { p[q] * v[q * k + n] });
        (alpha, beta)
    };
    let (alpha, beta) = split(sums);
    let loss = (0..k).map(|q| p[q] * sums[k * k + q]).collect();
    let event_loss = (0..k).map(|q| p[q] * sums[k * k + k + q]).collect();
    let (std_err, loss_std_err) = match se {
        Some(se) => {
            let (a, b) = split(se);
            (
                Some(GradientStdErr { alpha: a, beta: b }),
                Some((0..k).map(|q| p[q] * se[k * k + q]).collect()),
            )
        }
        None => (None, None),
    };
    Evaluation {
        gradient: GradientReport {
            alpha,
            beta,
            estimator,
            samples,
            std_err,
            dropped_mass,
            full_grad: None,
        },
        loss,
        event_loss,
        loss_std_err,
    }
}

/// Resolved source of population expectations, reused across GD steps.
#[derive(Debug, Clone)]
pub struct Evaluator {
    dist: TokenDistribution,
    n: usize,
    source: Source,
    intervals: Vec<(f64, f64)>,
    seed: u64,
}

#[derive(Debug, Clone)]
enum Source {
    Table(CountTable),
    MonteCarlo(usize),
}

impl Evaluator {
    /// `c` is the event constant for the restricted loss. `Auto` enumerates
    /// when the composition count fits `budget` and falls back to
    /// [`DEFAULT_MC_SAMPLES`] Monte Carlo draws otherwise.
    pub fn new(
        dist: &TokenDistribution,
        n: usize,
        estimator: Estimator,
        budget: usize,
        seed: u64,
        c: f64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("N must be at least 1".into()));
        }
        let k = dist.num_features();
        let source = match estimator {
            Estimator::Exact => Source::Table(CountTable::exact(dist, n, budget)?),
            Estimator::Truncated { min_prob } => {
                Source::Table(CountTable::truncated(dist, n, min_prob, budget)?)
            }
            Estimator::MonteCarlo { samples } => {
                if samples == 0 {
                    return Err(Error::InvalidArgument(
                        "Monte Carlo needs at least one sample".into(),
                    ));
                }
                Source::MonteCarlo(samples)
            }
            Estimator::Auto => {
                let count = crate::features::composition_count(k, n);
                if count <= budget as f64 {
                    Source::Table(CountTable::exact(dist, n, budget)?)
                } else {
                    log::info!(
                        "{count} count vectors exceed the budget {budget}; using Monte Carlo with {DEFAULT_MC_SAMPLES} samples"
                    );
                    Source::MonteCarlo(DEFAULT_MC_SAMPLES)
                }
            }
        };
        Ok(Self {
            dist: dist.clone(),
            n,
            source,
            intervals: crate::features::event_intervals(dist, n, c),
            seed,
        })
    }

    pub fn kind(&self) -> EstimatorKind {
        match &self.source {
            Source::Table(t) if t.is_exact() => EstimatorKind::Exact,
            Source::Table(_) => EstimatorKind::Truncated,
            Source::MonteCarlo(_) => EstimatorKind::MonteCarlo,
        }
    }

    pub fn samples(&self) -> Option<usize> {
        match self.source {
            Source::MonteCarlo(s) => Some(s),
            Source::Table(_) => None,
        }
    }

    pub fn table(&self) -> Option<&CountTable> {
        match &self.source {
            Source::Table(t) => Some(t),
            Source::MonteCarlo(_) => None,
        }
    }

    pub fn distribution(&self) -> &TokenDistribution {
        &self.dist
    }

    pub fn num_tokens(&self) -> usize {
        self.n
    }

    /// Expectations at `weights`. Monte Carlo draws for step `t` use a seed
    /// derived from `(seed, t)`.
    pub fn evaluate(&self, weights: &ReducedWeights, t: usize) -> Result<Evaluation> {
        if weights.num_features() != self.dist.num_features() {
            return Err(Error::Dimension("weights and distribution disagree on K".into()));
        }
        match &self.source {
            Source::Table(table) => Ok(evaluate_table(table, &self.dist, weights, Some(&self.intervals))),
            Source::MonteCarlo(samples) => evaluate_mc(
                &self.dist,
                self.n,
                weights,
                *samples,
                step_seed(self.seed, t as u64),
                Some(&self.intervals),
            ),
        }
    }
}

/// SplitMix64 mix of a base seed and a step index.
pub(crate) fn step_seed(seed: u64, t: u64) -> u64 {
    let mut z = seed.wrapping_add(t.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Exact population gradient by full enumeration (default budget).
pub fn population_gradient_exact(
    dist: &TokenDistribution,
    n: usize,
    weights: &ReducedWeights,
) -> Result<GradientReport> {
    let table = CountTable::exact(dist, n, DEFAULT_ENUMERATION_BUDGET)?;
    Ok(evaluate_table(&table, dist, weights, None).gradient)
}

/// Monte Carlo population gradient; the block seeds are drawn from `rng`.
pub fn population_gradient_mc<R: Rng + ?Sized>(
    dist: &TokenDistribution,
    n: usize,
    weights: &ReducedWeights,
    samples: usize,
    rng: &mut R,
) -> Result<GradientReport> {
    let seed = rng.gen::<u64>();
    Ok(evaluate_mc(dist, n, weights, samples, seed, None)?.gradient)
}

/// `grad_Q L` in the ambient `d x d` space, computed from `Q` directly:
///
/// ```text
/// grad = sum_k p_k E[ sum_m Attn_m <u, v_m> (v_m - xbar) ] v_k^T,
/// xbar = sum_m Attn_m v_m,  u = xbar - v_k
/// ```
///
/// with logits `v_m^T Q v_k`. Only the count table is shared with the
/// reduced path.
pub fn full_q_gradient_table(
    table: &CountTable,
    dist: &TokenDistribution,
    q: &DMatrix<f64>,
    basis: &FeatureBasis,
) -> Result<DMatrix<f64>> {
    let d = basis.dim();
    let k = basis.num_features();
    if q.nrows() != d || q.ncols() != d {
        return Err(Error::Dimension(format!("Q must be {d}x{d}")));
    }
    if table.num_features() != k || dist.num_features() != k {
        return Err(Error::Dimension("table, distribution and basis disagree on K".into()));
    }
    let v = basis.matrix();
    // logits[(m, j)] = v_m^T Q v_j, formed in the ambient space.
    let qv = q * v;
    let logit_cols: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..k).map(|m| v.column(m).dot(&qv.column(j))).collect())
        .collect();
    let weights = ReducedWeights::from_matrix(DMatrix::from_fn(k, k, |m, j| logit_cols[j][m]))?;
    let kernel = Kernel::new(&weights);
    let vecs: Vec<DVector<f64>> = (0..k).map(|m| v.column(m).into_owned()).collect();

    let parts: Vec<Vec<f64>> = table
        .probs()
        .par_chunks(TABLE_CHUNK)
        .zip(table.raw_counts().par_chunks(TABLE_CHUNK * k))
        .map(|(probs, counts)| {
            // g[j] accumulates the d-vector multiplying v_j^T.
            let mut acc = vec![0.0; k * d];
            let mut attn = vec![0.0; k];
            let mut xbar = DVector::zeros(d);
            for (c, &p) in counts.chunks_exact(k).zip(probs) {
                for j in 0..k {
                    kernel.profile(c, j, &mut attn);
                    xbar.fill(0.0);
                    for m in 0..k {
                        if attn[m] != 0.0 {
                            xbar.axpy(attn[m], &vecs[m], 1.0);
                        }
                    }
                    let u = &xbar - &vecs[j];
                    let g = &mut acc[j * d..(j + 1) * d];
                    for m in 0..k {
                        if attn[m] == 0.0 {
                            continue;
                        }
                        let coef = p * attn[m] * u.dot(&vecs[m]);
                        for i in 0..d {
                            g[i] += coef * (vecs[m][i] - xbar[i]);
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let acc = pairwise_sum(parts);
    let mut grad = DMatrix::zeros(d, d);
    for j in 0..k {
        let g = DVector::from_column_slice(&acc[j * d..(j + 1) * d]);
        grad += (g * dist.prob(j)) * vecs[j].transpose();
    }
    Ok(grad)
}

pub fn full_q_gradient(
    dist: &TokenDistribution,
    n: usize,
    q: &DMatrix<f64>,
    basis: &FeatureBasis,
) -> Result<DMatrix<f64>> {
    let table = CountTable::exact(dist, n, DEFAULT_ENUMERATION_BUDGET)?;
    full_q_gradient_table(&table, dist, q, basis)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Central differences of [`per_count_loss`] over every entry of `M`,
/// compared with `-a` (diagonal of the query column), `-b_n` (rest of the
/// query column) and zero elsewhere. Relative errors are taken over entries
/// whose magnitude exceeds `1e-10`.
pub fn finite_diff_check(
    counts: &PromptCounts,
    query: usize,
    weights: &ReducedWeights,
    h: f64,
) -> Result<FiniteDiffReport> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let k = weights.num_features();
    let ig = per_count_integrands(counts, query, weights)?;
    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut probe = weights.clone();
    for col in 0..k {
        for row in 0..k {
            let orig = weights.matrix()[(row, col)];
            probe.matrix_mut()[(row, col)] = orig + h;
            let up = per_count_loss(counts, query, &probe)?;
            probe.matrix_mut()[(row, col)] = orig - h;
            let down = per_count_loss(counts, query, &probe)?;
            probe.matrix_mut()[(row, col)] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = if col != query {
                0.0
            } else if row == query {
                -ig.a
            } else {
                -ig.b[row]
            };
            let abs = (numeric - analytic).abs();
            report.max_abs_err = report.max_abs_err.max(abs);
            let scale = numeric.abs().max(analytic.abs());
            if scale > 1e-10 {
                report.checked += 1;
                report.max_rel_err = report.max_rel_err.max(abs / scale);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Regime;
    use approx::assert_abs_diff_eq;

    fn counts(v: &[u32]) -> PromptCounts {
        PromptCounts::new(v.to_vec()).unwrap()
    }

    #[test]
    fn per_count_loss_examples() {
        let zero = ReducedWeights::zeros(2);
        assert_abs_diff_eq!(per_count_loss(&counts(&[1, 1]), 0, &zero).unwrap(), 0.25, epsilon = 1e-15);
        assert_eq!(per_count_loss(&counts(&[4, 0]), 0, &zero).unwrap(), 0.0);
        assert_eq!(per_count_loss(&counts(&[0, 3]), 0, &zero).unwrap(), 1.0);
    }

    #[test]
    fn integrand_examples() {
        let zero = ReducedWeights::zeros(2);
        let ig = per_count_integrands(&counts(&[1, 1]), 0, &zero).unwrap();
        assert_abs_diff_eq!(ig.a, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(ig.b[1], -0.25, epsilon = 1e-15);
        assert_eq!(ig.b[0], 0.0);

        let ig = per_count_integrands(&counts(&[6, 0, 0]), 0, &ReducedWeights::zeros(3)).unwrap();
        assert_eq!(ig.a, 0.0);
        assert!(ig.b.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn exact_gradient_two_by_two() {
        let dist = TokenDistribution::balanced(2).unwrap();
        let g = population_gradient_exact(&dist, 2, &ReducedWeights::zeros(2)).unwrap();
        assert_abs_diff_eq!(g.alpha[0], 1.0 / 16.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.alpha[1], 1.0 / 16.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.beta[(0, 1)], -1.0 / 16.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.beta[(1, 0)], -1.0 / 16.0, epsilon = 1e-15);
        assert_eq!(g.estimator, EstimatorKind::Exact);
        assert!(g.std_err.is_none());
    }

    #[test]
    fn single_feature_has_no_gradient() {
        let dist = TokenDistribution::new(vec![1.0], Regime::Custom).unwrap();
        let g = population_gradient_exact(&dist, 7, &ReducedWeights::zeros(1)).unwrap();
        assert_eq!(g.alpha, vec![0.0]);
    }

    #[test]
    fn balanced_zero_init_is_exchangeable() {
        let dist = TokenDistribution::balanced(3).unwrap();
        let g = population_gradient_exact(&dist, 9, &ReducedWeights::zeros(3)).unwrap();
        for k in 1..3 {
            assert_abs_diff_eq!(g.alpha[k], g.alpha[0], epsilon = 1e-15);
        }
        let b01 = g.beta[(0, 1)];
        for q in 0..3 {
            for n in 0..3 {
                if q != n {
                    assert_abs_diff_eq!(g.beta[(q, n)], b01, epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn kernel_matches_profile_path() {
        let mut m = ReducedWeights::zeros(3);
        m.set_a(0, 0.4);
        m.set_b(0, 1, -1.2);
        m.set_b(0, 2, 0.3);
        m.set_a(2, -0.5);
        let c = counts(&[2, 0, 5]);
        let kernel = Kernel::new(&m);
        let mut vals = vec![0.0; kernel.width()];
        let mut scratch = vec![0.0; 3];
        kernel.values(c.counts(), true, &mut scratch, &mut vals);
        for q in 0..3 {
            let ig = per_count_integrands(&c, q, &m).unwrap();
            assert_abs_diff_eq!(vals[q * 3 + q], ig.a, epsilon = 1e-15);
            for n in 0..3 {
                if n != q {
                    assert_abs_diff_eq!(vals[q * 3 + n], ig.b[n], epsilon = 1e-15);
                }
            }
            assert_abs_diff_eq!(vals[9 + q], per_count_loss(&c, q, &m).unwrap(), epsilon = 1e-15);
        }
    }

    #[test]
    fn single_sample_mc_equals_draw() {
        let dist = TokenDistribution::new(vec![0.2, 0.3, 0.5], Regime::Custom).unwrap();
        let mut m = ReducedWeights::zeros(3);
        m.set_a(1, 0.7);
        let seed = 99;
        let mc = evaluate_mc(&dist, 12, &m, 1, seed, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let c = PromptCounts::new(draw_multinomial(dist.probs(), 12, &mut rng)).unwrap();
        for q in 0..3 {
            let ig = per_count_integrands(&c, q, &m).unwrap();
            assert_eq!(mc.gradient.alpha[q], dist.prob(q) * ig.a);
        }
    }

    #[test]
    fn finite_difference_agrees_on_small_case() {
        let mut m = ReducedWeights::zeros(3);
        m.set_a(1, 0.9);
        m.set_b(1, 0, -0.4);
        m.set_b(1, 2, 1.3);
        let rep = finite_diff_check(&counts(&[3, 2, 4]), 1, &m, 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
        assert_eq!(rep.checked, 3);
        assert!(finite_diff_check(&counts(&[3, 2, 4]), 1, &m, 0.0).is_err());
    }

    #[test]
    fn saturated_attention_has_vanishing_gradient() {
        let mut m = ReducedWeights::zeros(2);
        m.set_a(0, 60.0);
        let rep = finite_diff_check(&counts(&[5, 5]), 0, &m, 1e-5).unwrap();
        assert!(rep.max_abs_err < 1e-20);
        let ig = per_count_integrands(&counts(&[5, 5]), 0, &m).unwrap();
        assert!(ig.a.abs() < 1e-20 && ig.b[1].abs() < 1e-20);
    }

    #[test]
    fn full_gradient_single_feature_is_zero() {
        let dist = TokenDistribution::new(vec![1.0], Regime::Custom).unwrap();
        let basis = FeatureBasis::build(3, 1, 0, crate::features::BasisMode::Identity).unwrap();
        let g = full_q_gradient(&dist, 4, &DMatrix::zeros(3, 3), &basis).unwrap();
        assert_eq!(g.amax(), 0.0);
    }
}
