//! Feature bases, token distributions and prompt count statistics.
//!
//! Everything downstream depends on a prompt only through its count vector
//! `(n_1, .., n_K)`, so this module owns sampling, exact enumeration (with
//! multinomial probabilities) and the concentration events that the loss
//! bounds condition on.

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};

/// Default cap on the number of count vectors an exact enumeration may visit.
pub const DEFAULT_ENUMERATION_BUDGET: usize = 2_000_000;

/// Default bound on `max p_k / min p_k` for the balanced regime.
pub const DEFAULT_BALANCED_RATIO: f64 = 4.0;

/// Slack multiplier for the dominant-feature interval of the imbalanced event.
pub const DOMINANT_EVENT_SLACK: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisMode {
    Identity,
    RandomOrthonormal,
}

/// `K` orthonormal feature vectors stored as the columns of a `d x K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBasis {
    vectors: DMatrix<f64>,
}

impl FeatureBasis {
    pub fn build(d: usize, k: usize, seed: u64, mode: BasisMode) -> Result<Self> {
        if k == 0 || k > d {
            return Err(Error::Dimension(format!(
                "need 1 <= K <= d, got K={k}, d={d}"
            )));
        }
        let vectors = match mode {
            BasisMode::Identity => DMatrix::identity(d, k),
            BasisMode::RandomOrthonormal => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let gauss =
                    DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
                let qr = gauss.qr();
                let r = qr.r();
                let mut q = qr.q();
                // Fix column signs so the factorization is unique.
                for j in 0..k {
                    if r[(j, j)] < 0.0 {
                        q.column_mut(j).neg_mut();
                    }
                }
                q
            }
        };
        Ok(Self { vectors })
    }

    pub fn identity(k: usize) -> Self {
        Self {
            vectors: DMatrix::identity(k, k),
        }
    }

    /// Wraps an explicit `d x K` matrix; columns must be orthonormal.
    pub fn from_matrix(vectors: DMatrix<f64>) -> Result<Self> {
        if vectors.ncols() == 0 || vectors.ncols() > vectors.nrows() {
            return Err(Error::Dimension(format!(
                "basis matrix must be d x K with 1 <= K <= d, got {}x{}",
                vectors.nrows(),
                vectors.ncols()
            )));
        }
        let basis = Self { vectors };
        let err = basis.orthonormality_error();
        if err > 1e-12 {
            return Err(Error::Dimension(format!(
                "columns are not orthonormal (max deviation {err:e})"
            )));
        }
        Ok(basis)
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn vector(&self, k: usize) -> DVectorView<'_, f64> {
        self.vectors.column(k)
    }

    /// `max |(V^T V - I)_{ij}|`.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.num_features();
        let gram = self.vectors.transpose() * &self.vectors;
        (gram - DMatrix::<f64>::identity(k, k)).amax()
    }

    /// Inner products `<w, v_k>` for every feature.
    pub fn project(&self, w: &DVector<f64>) -> Vec<f64> {
        (0..self.num_features())
            .map(|k| self.vector(k).dot(w))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Balanced,
    Imbalanced,
    Custom,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Balanced => "balanced",
            Regime::Imbalanced => "imbalanced",
            Regime::Custom => "custom",
        }
    }
}

/// Probabilities `p_k` of drawing feature `v_k` for each token.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenDistribution {
    probs: Vec<f64>,
    regime: Regime,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>, regime: Regime) -> Result<Self> {
        Self::with_ratio_bound(probs, regime, DEFAULT_BALANCED_RATIO)
    }

    pub fn with_ratio_bound(probs: Vec<f64>, regime: Regime, ratio_bound: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Distribution("empty probability vector".into()));
        }
        let single = probs.len() == 1;
        for (k, &p) in probs.iter().enumerate() {
            let ok = p.is_finite() && p > 0.0 && (p < 1.0 || (single && p == 1.0));
            if !ok {
                return Err(Error::Distribution(format!("p_{} = {p} is not in (0,1)", k + 1)));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Distribution(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        match regime {
            Regime::Balanced => {
                let max = probs.iter().cloned().fold(f64::MIN, f64::max);
                let min = probs.iter().cloned().fold(f64::MAX, f64::min);
                if max / min > ratio_bound {
                    return Err(Error::Distribution(format!(
                        "balanced regime needs max/min <= {ratio_bound}, got {}",
                        max / min
                    )));
                }
            }
            Regime::Imbalanced => {
                if probs.len() < 2 || probs[1..].iter().any(|&p| p >= probs[0]) {
                    return Err(Error::Distribution(
                        "imbalanced regime needs p_1 > p_k for every k > 1".into(),
                    ));
                }
            }
            Regime::Custom => {}
        }
        Ok(Self { probs, regime })
    }

    /// `p_k = 1/K`.
    pub fn balanced(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Distribution("K must be positive".into()));
        }
        let mut probs = vec![1.0 / k as f64; k];
        // Put the rounding residue on the last entry so the sum is exact.
        let head: f64 = probs[..k - 1].iter().sum();
        probs[k - 1] = 1.0 - head;
        Self::new(probs, Regime::Balanced)
    }

    /// `p_1` given, the remaining mass spread uniformly over `K - 1` features.
    pub fn imbalanced(k: usize, p1: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Distribution("imbalanced regime needs K >= 2".into()));
        }
        let rest = (1.0 - p1) / (k - 1) as f64;
        let mut probs = vec![p1];
        probs.extend(std::iter::repeat(rest).take(k - 1));
        let head: f64 = probs[..k - 1].iter().sum();
        probs[k - 1] = 1.0 - head;
        Self::new(probs, Regime::Imbalanced)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, k: usize) -> f64 {
        self.probs[k]
    }

    pub fn num_features(&self) -> usize {
        self.probs.len()
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    /// `P(n_k = 0) = (1 - p_k)^N`, evaluated in log space.
    pub fn prob_absent(&self, k: usize, n: usize) -> f64 {
        let p = self.probs[k];
        if p >= 1.0 {
            return if n == 0 { 1.0 } else { 0.0 };
        }
        (n as f64 * (-p).ln_1p()).exp()
    }
}

/// Token counts per feature; `n.iter().sum() == N`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct PromptCounts {
    counts: Vec<u32>,
}

impl PromptCounts {
    pub fn new(counts: Vec<u32>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidPrompt("empty count vector".into()));
        }
        Ok(Self { counts })
    }

    pub fn from_tokens(tokens: &[usize], k: usize) -> Result<Self> {
        let mut counts = vec![0u32; k];
        for &tok in tokens {
            if tok >= k {
                return Err(Error::InvalidPrompt(format!(
                    "token feature {tok} out of range for K={k}"
                )));
            }
            counts[tok] += 1;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn get(&self, k: usize) -> u32 {
        self.counts[k]
    }

    pub fn num_features(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }
}

/// A concrete prompt: token features, query feature and (optionally) the
/// task vector that labels the tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub tokens: Vec<usize>,
    pub query: usize,
    pub task: Option<DVector<f64>>,
}

impl Prompt {
    pub fn new(tokens: Vec<usize>, query: usize, task: Option<DVector<f64>>) -> Result<Self> {
        if let Some(w) = &task {
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidPrompt("task vector is not finite".into()));
            }
        }
        Ok(Self {
            tokens,
            query,
            task,
        })
    }

    pub fn counts(&self, k: usize) -> Result<PromptCounts> {
        PromptCounts::from_tokens(&self.tokens, k)
    }
}

/// Draws a count vector from `multinomial(N, p)` by sequential conditional
/// binomials.
pub fn sample_counts<R: Rng + ?Sized>(
    dist: &TokenDistribution,
    n: usize,
    rng: &mut R,
) -> Result<PromptCounts> {
    if n == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    Ok(PromptCounts {
        counts: draw_multinomial(dist.probs(), n as u64, rng),
    })
}

pub(crate) fn draw_multinomial<R: Rng + ?Sized>(probs: &[f64], n: u64, rng: &mut R) -> Vec<u32> {
    let k = probs.len();
    let mut out = vec![0u32; k];
    let mut remaining = n;
    let mut mass = 1.0;
    for j in 0..k - 1 {
        if remaining == 0 {
            break;
        }
        let q = (probs[j] / mass).clamp(0.0, 1.0);
        let draw = if q >= 1.0 {
            remaining
        } else {
            Binomial::new(remaining, q)
                .expect("conditional probability in [0,1]")
                .sample(rng)
        };
        out[j] = draw as u32;
        remaining -= draw;
        mass -= probs[j];
    }
    out[k - 1] += remaining as u32;
    out
}

/// `ln(n!)` for `n = 0..=max`, accumulated once.
#[derive(Debug, Clone)]
pub struct LogFactorials {
    table: Vec<f64>,
}

impl LogFactorials {
    pub fn new(max: usize) -> Self {
        let mut table = Vec::with_capacity(max + 1);
        let mut acc = 0.0f64;
        table.push(0.0);
        for i in 1..=max {
            acc += (i as f64).ln();
            table.push(acc);
        }
        Self { table }
    }

    pub fn get(&self, n: usize) -> f64 {
        self.table[n]
    }

    /// Log multinomial pmf of `counts` under `log_p` (one entry per feature).
    pub fn log_multinomial<C: Copy + Into<u64>>(&self, counts: &[C], log_p: &[f64]) -> f64 {
        let total: u64 = counts.iter().map(|&c| c.into()).sum();
        let mut lp = self.get(total as usize);
        for (&c, &lq) in counts.iter().zip(log_p) {
            let c: u64 = c.into();
            lp -= self.get(c as usize);
            if c > 0 {
                lp += c as f64 * lq;
            }
        }
        lp
    }
}

/// Number of count vectors for `K` features and `N` tokens, `C(N+K-1, K-1)`,
/// as a float so that huge values do not overflow.
pub fn composition_count(k: usize, n: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let mut acc = 1.0f64;
    for i in 1..k {
        acc *= (n + i) as f64 / i as f64;
    }
    acc.round()
}

/// Iterates over all compositions of `N` into `K` nonnegative parts in
/// decreasing lexicographic order, starting at `(N, 0, .., 0)`.
#[derive(Debug, Clone)]
pub struct Compositions {
    current: Option<Vec<u32>>,
}

impl Compositions {
    pub fn new(k: usize, n: usize) -> Self {
        let mut first = vec![0u32; k.max(1)];
        first[0] = n as u32;
        Self {
            current: if k == 0 { None } else { Some(first) },
        }
    }
}

impl Iterator for Compositions {
    type Item = Vec<u32>;

    fn next(&mut self) -> Option<Vec<u32>> {
        let out = self.current.take()?;
        let k = out.len();
        let mut next = out.clone();
        if let Some(i) = (0..k.saturating_sub(1)).rev().find(|&i| next[i] > 0) {
            let tail: u32 = next[i + 1..].iter().sum();
            next[i] -= 1;
            next[i + 1] = tail + 1;
            for c in next[i + 2..].iter_mut() {
                *c = 0;
            }
            self.current = Some(next);
        }
        Some(out)
    }
}

/// Stream of `(counts, probability)` over every count vector.
pub struct CountEnumeration {
    compositions: Compositions,
    log_p: Vec<f64>,
    factorials: LogFactorials,
}

impl Iterator for CountEnumeration {
    type Item = (PromptCounts, f64);

    fn next(&mut self) -> Option<Self::Item> {
        let counts = self.compositions.next()?;
        let prob = self.factorials.log_multinomial(&counts, &self.log_p).exp();
        Some((PromptCounts { counts }, prob))
    }
}

pub fn enumerate_counts(
    dist: &TokenDistribution,
    n: usize,
    budget: usize,
) -> Result<CountEnumeration> {
    let k = dist.num_features();
    let count = composition_count(k, n);
    if count > budget as f64 {
        return Err(Error::EnumerationTooLarge { count, budget });
    }
    Ok(CountEnumeration {
        compositions: Compositions::new(k, n),
        log_p: dist.probs().iter().map(|p| p.ln()).collect(),
        factorials: LogFactorials::new(n),
    })
}

/// Materialized support of the count distribution: every count vector (or
/// every vector above a probability floor) with its multinomial probability.
#[derive(Debug, Clone)]
pub struct CountTable {
    k: usize,
    n: usize,
    counts: Vec<u16>,
    probs: Vec<f64>,
    dropped_mass: f64,
}

impl CountTable {
    /// Full enumeration; fails when `C(N+K-1, K-1)` exceeds `budget`.
    pub fn exact(dist: &TokenDistribution, n: usize, budget: usize) -> Result<Self> {
        check_u16(n)?;
        let k = dist.num_features();
        let enumeration = enumerate_counts(dist, n, budget)?;
        let size = composition_count(k, n) as usize;
        let mut counts = Vec::with_capacity(size * k);
        let mut probs = Vec::with_capacity(size);
        for (c, p) in enumeration {
            counts.extend(c.counts.iter().map(|&x| x as u16));
            probs.push(p);
        }
        Ok(Self {
            k,
            n,
            counts,
            probs,
            dropped_mass: 0.0,
        })
    }

    /// Enumeration restricted to count vectors with probability at least
    /// `min_prob`. Branches are pruned on the running product of conditional
    /// binomial probabilities, which upper-bounds the probability of every
    /// completion. The discarded mass is kept in [`CountTable::dropped_mass`].
    pub fn truncated(
        dist: &TokenDistribution,
        n: usize,
        min_prob: f64,
        budget: usize,
    ) -> Result<Self> {
        if min_prob <= 0.0 {
            return Self::exact(dist, n, budget);
        }
        check_u16(n)?;
        let k = dist.num_features();
        let log_p: Vec<f64> = dist.probs().iter().map(|p| p.ln()).collect();
        let lf = LogFactorials::new(n);
        let log_floor = min_prob.ln();
        let mut table = Self {
            k,
            n,
            counts: Vec::new(),
            probs: Vec::new(),
            dropped_mass: 0.0,
        };
        let mut prefix = vec![0u16; k];
        let mut walker = Pruner {
            probs: dist.probs(),
            log_p: &log_p,
            lf: &lf,
            log_floor,
            budget,
            table: &mut table,
        };
        walker.descend(0, n, 1.0, 0.0, &mut prefix)?;
        let kept: f64 = table.probs.iter().sum();
        table.dropped_mass = (1.0 - kept).max(0.0);
        Ok(table)
    }

    pub fn num_features(&self) -> usize {
        self.k
    }

    pub fn num_tokens(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn counts(&self, i: usize) -> &[u16] {
        &self.counts[i * self.k..(i + 1) * self.k]
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn raw_counts(&self) -> &[u16] {
        &self.counts
    }

    /// Probability mass excluded by truncation (0 for a full enumeration).
    pub fn dropped_mass(&self) -> f64 {
        self.dropped_mass
    }

    pub fn is_exact(&self) -> bool {
        self.dropped_mass == 0.0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u16], f64)> + '_ {
        self.counts.chunks_exact(self.k).zip(self.probs.iter().copied())
    }
}

fn check_u16(n: usize) -> Result<()> {
    if n > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "count tables support N <= {}, got {n}",
            u16::MAX
        )));
    }
    Ok(())
}

struct Pruner<'a> {
    probs: &'a [f64],
    log_p: &'a [f64],
    lf: &'a LogFactorials,
    log_floor: f64,
    budget: usize,
    table: &'a mut CountTable,
}

impl Pruner<'_> {
    fn descend(
        &mut self,
        j: usize,
        remaining: usize,
        mass: f64,
        log_partial: f64,
        prefix: &mut [u16],
    ) -> Result<()> {
        let k = self.probs.len();
        if j == k - 1 {
            prefix[j] = remaining as u16;
            let lp = self.lf.log_multinomial(prefix, self.log_p);
            if lp >= self.log_floor {
                if self.table.probs.len() >= self.budget {
                    return Err(Error::EnumerationTooLarge {
                        count: f64::INFINITY,
                        budget: self.budget,
                    });
                }
                self.table.counts.extend_from_slice(prefix);
                self.table.probs.push(lp.exp());
            }
            return Ok(());
        }
        let q = (self.probs[j] / mass).clamp(0.0, 1.0);
        let (lq, lnq) = (q.ln(), (-q).ln_1p());
        for c in 0..=remaining {
            let mut lb = self.lf.get(remaining) - self.lf.get(c) - self.lf.get(remaining - c);
            if c > 0 {
                lb += c as f64 * lq;
            }
            if remaining > c {
                lb += (remaining - c) as f64 * lnq;
            }
            let lp = log_partial + lb;
            if lp < self.log_floor {
                continue;
            }
            prefix[j] = c as u16;
            self.descend(j + 1, remaining - c, mass - self.probs[j], lp, prefix)?;
        }
        Ok(())
    }
}

/// `sqrt(20 K^3 / N)`, the smallest event constant for which the multinomial
/// tail bound applies.
pub fn default_event_constant(k: usize, n: usize) -> f64 {
    (20.0 * (k as f64).powi(3) / n as f64).sqrt()
}

/// `min(1, 3 exp(-c^2 N / (25 K^2)))`.
pub fn multinomial_tail_bound(n: usize, k: usize, c: f64) -> f64 {
    let kk = k as f64;
    (3.0 * (-(c * c) * n as f64 / (25.0 * kk * kk)).exp()).min(1.0)
}

/// Per-feature constants `(lower, upper)` of the concentration event.
///
/// Balanced (and custom): `p_k K -/+ c`, so that `n_k` lies in
/// `[lower N/K, upper N/K]`. Imbalanced: the dominant feature uses
/// `p_1 -/+ s c` with `s = max(0.01, 1/K)` and bounds `[lower N, upper N]`;
/// the remaining features use the balanced form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventConstants {
    pub c: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

pub fn event_constants(dist: &TokenDistribution, c: f64) -> EventConstants {
    let k = dist.num_features();
    let kk = k as f64;
    let mut lower: Vec<f64> = dist.probs().iter().map(|p| p * kk - c).collect();
    let mut upper: Vec<f64> = dist.probs().iter().map(|p| p * kk + c).collect();
    if dist.regime() == Regime::Imbalanced {
        let slack = DOMINANT_EVENT_SLACK.max(1.0 / kk) * c;
        lower[0] = dist.prob(0) - slack;
        upper[0] = dist.prob(0) + slack;
    }
    EventConstants { c, lower, upper }
}

/// Closed intervals for `n_k` that define event membership.
pub fn event_intervals(dist: &TokenDistribution, n: usize, c: f64) -> Vec<(f64, f64)> {
    let consts = event_constants(dist, c);
    let nf = n as f64;
    let kk = dist.num_features() as f64;
    (0..dist.num_features())
        .map(|k| {
            if k == 0 && dist.regime() == Regime::Imbalanced {
                (consts.lower[0] * nf, consts.upper[0] * nf)
            } else {
                (consts.lower[k] * nf / kk, consts.upper[k] * nf / kk)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventReport {
    pub member: bool,
    pub intervals: Vec<(f64, f64)>,
    pub inside: Vec<bool>,
    /// Whether `c >= sqrt(20 K^3 / N)`.
    pub admissible: bool,
}

pub fn event_membership(counts: &PromptCounts, dist: &TokenDistribution, c: f64) -> EventReport {
    let n = counts.total() as usize;
    let k = dist.num_features();
    let admissible = c >= default_event_constant(k, n) * (1.0 - 1e-12);
    if !admissible {
        log::warn!(
            "event constant c={c} is below sqrt(20K^3/N)={}",
            default_event_constant(k, n)
        );
    }
    let intervals = event_intervals(dist, n, c);
    let inside: Vec<bool> = counts
        .counts()
        .iter()
        .zip(&intervals)
        .map(|(&x, &(lo, hi))| (x as f64) >= lo && (x as f64) <= hi)
        .collect();
    EventReport {
        member: inside.iter().all(|&b| b),
        intervals,
        inside,
        admissible,
    }
}

/// Membership test without the report, for hot loops.
pub(crate) fn in_event<C: Copy + Into<u64>>(counts: &[C], intervals: &[(f64, f64)]) -> bool {
    counts.iter().zip(intervals).all(|(&x, &(lo, hi))| {
        let x = x.into() as f64;
        x >= lo && x <= hi
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_basis_is_standard_columns() {
        let b = FeatureBasis::build(3, 2, 0, BasisMode::Identity).unwrap();
        assert_eq!(b.matrix(), &DMatrix::<f64>::identity(3, 2));
    }

    #[test]
    fn square_basis_is_orthonormal_in_both_modes() {
        for mode in [BasisMode::Identity, BasisMode::RandomOrthonormal] {
            let b = FeatureBasis::build(2, 2, 11, mode).unwrap();
            assert!(b.orthonormality_error() <= 1e-12);
        }
    }

    #[test]
    fn random_basis_is_deterministic() {
        let a = FeatureBasis::build(8, 4, 7, BasisMode::RandomOrthonormal).unwrap();
        let b = FeatureBasis::build(8, 4, 7, BasisMode::RandomOrthonormal).unwrap();
        assert_eq!(a.matrix().as_slice(), b.matrix().as_slice());
        assert!(a.orthonormality_error() <= 1e-12);
        let c = FeatureBasis::build(8, 4, 8, BasisMode::RandomOrthonormal).unwrap();
        assert_ne!(a.matrix().as_slice(), c.matrix().as_slice());
    }

    #[test]
    fn more_features_than_dimensions_is_rejected() {
        assert!(matches!(
            FeatureBasis::build(2, 3, 0, BasisMode::Identity),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn distribution_validation() {
        assert!(TokenDistribution::new(vec![0.5, 0.6], Regime::Custom).is_err());
        assert!(TokenDistribution::new(vec![0.0, 1.0], Regime::Custom).is_err());
        assert!(TokenDistribution::new(vec![0.9, 0.1], Regime::Balanced).is_err());
        assert!(TokenDistribution::new(vec![0.3, 0.7], Regime::Imbalanced).is_err());
        assert!(TokenDistribution::new(vec![1.0], Regime::Custom).is_ok());
        let d = TokenDistribution::imbalanced(4, 0.55).unwrap();
        assert_abs_diff_eq!(d.probs().iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.prob(2), 0.15, epsilon = 1e-15);
    }

    #[test]
    fn single_feature_takes_every_token() {
        let d = TokenDistribution::new(vec![1.0], Regime::Custom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_counts(&d, 5, &mut rng).unwrap().counts(), &[5]);
    }

    #[test]
    fn zero_tokens_rejected() {
        let d = TokenDistribution::new(vec![0.2, 0.3, 0.5], Regime::Custom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_counts(&d, 0, &mut rng).is_err());
    }

    #[test]
    fn large_sample_within_binomial_band() {
        // sd of n_1/N is sqrt(0.25 / 1e6) = 5e-4; 3 sd band is +/- 0.0015.
        let d = TokenDistribution::balanced(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let c = sample_counts(&d, 1_000_000, &mut rng).unwrap();
        let frac = c.get(0) as f64 / 1e6;
        assert!((0.497..=0.503).contains(&frac), "{frac}");
        assert_eq!(c.total(), 1_000_000);
    }

    #[test]
    fn binomial_two_enumeration() {
        let d = TokenDistribution::balanced(2).unwrap();
        let got: Vec<_> = enumerate_counts(&d, 2, DEFAULT_ENUMERATION_BUDGET)
            .unwrap()
            .map(|(c, p)| (c.counts().to_vec(), p))
            .collect();
        assert_eq!(got.len(), 3);
        assert_eq!(got[0].0, vec![2, 0]);
        assert_eq!(got[1].0, vec![1, 1]);
        assert_eq!(got[2].0, vec![0, 2]);
        assert_abs_diff_eq!(got[0].1, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(got[1].1, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(got[2].1, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn single_token_enumeration_recovers_p() {
        let d = TokenDistribution::new(vec![0.2, 0.3, 0.5], Regime::Custom).unwrap();
        let got: Vec<_> = enumerate_counts(&d, 1, 100).unwrap().collect();
        assert_eq!(got.len(), 3);
        for (c, p) in got {
            let k = c.counts().iter().position(|&x| x == 1).unwrap();
            assert_abs_diff_eq!(p, d.prob(k), epsilon = 1e-15);
        }
    }

    #[test]
    fn enumeration_normalizes() {
        let d = TokenDistribution::balanced(2).unwrap();
        let all: Vec<_> = enumerate_counts(&d, 30, 1000).unwrap().collect();
        assert_eq!(all.len(), 31);
        let total: f64 = all.iter().map(|(_, p)| p).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn compositions_cover_every_vector_once() {
        let all: Vec<_> = Compositions::new(3, 4).collect();
        assert_eq!(all.len() as f64, composition_count(3, 4));
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), all.len());
        assert!(all.iter().all(|c| c.iter().sum::<u32>() == 4));
    }

    #[test]
    fn budget_is_enforced() {
        let d = TokenDistribution::balanced(4).unwrap();
        let err = enumerate_counts(&d, 256, DEFAULT_ENUMERATION_BUDGET).err().unwrap();
        assert!(matches!(err, Error::EnumerationTooLarge { .. }));
    }

    #[test]
    fn truncated_table_keeps_almost_all_mass() {
        let d = TokenDistribution::new(vec![0.5, 0.3, 0.2], Regime::Custom).unwrap();
        let full = CountTable::exact(&d, 60, 10_000).unwrap();
        let cut = CountTable::truncated(&d, 60, 1e-14, 10_000).unwrap();
        assert!(cut.len() < full.len());
        assert!(cut.dropped_mass() < 1e-11);
        let kept_full: f64 = full
            .iter()
            .filter(|(_, p)| *p >= 1e-14)
            .map(|(_, p)| p)
            .sum();
        assert_abs_diff_eq!(kept_full, 1.0 - cut.dropped_mass(), epsilon = 1e-12);
        assert_eq!(
            full.iter().filter(|(_, p)| *p >= 1e-14).count(),
            cut.len()
        );
    }

    #[test]
    fn event_balanced_examples() {
        let d = TokenDistribution::balanced(2).unwrap();
        let c = (20.0f64 * 8.0 / 100.0).sqrt();
        let rep = event_membership(&PromptCounts::new(vec![50, 50]).unwrap(), &d, c);
        assert!(rep.member && rep.admissible);
        assert_abs_diff_eq!(rep.intervals[0].0, 50.0 - c * 50.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.intervals[0].1, 50.0 + c * 50.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c * 50.0, 63.245553203367585, epsilon = 1e-12);

        let rep = event_membership(&PromptCounts::new(vec![60, 40]).unwrap(), &d, 0.1);
        assert!(!rep.member);
        assert!(!rep.admissible);
    }

    #[test]
    fn event_center_is_member() {
        let d = TokenDistribution::new(vec![0.25, 0.25, 0.5], Regime::Custom).unwrap();
        let rep = event_membership(&PromptCounts::new(vec![25, 25, 50]).unwrap(), &d, 0.01);
        assert!(rep.member);
        let d = TokenDistribution::imbalanced(3, 0.5).unwrap();
        let rep = event_membership(&PromptCounts::new(vec![50, 25, 25]).unwrap(), &d, 0.01);
        assert!(rep.member);
    }

    #[test]
    fn imbalanced_event_uses_dominant_slack_for_large_k() {
        let d = TokenDistribution::imbalanced(200, 0.5).unwrap();
        let consts = event_constants(&d, 2.0);
        assert_abs_diff_eq!(consts.lower[0], 0.5 - 0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(consts.upper[0], 0.5 + 0.02, epsilon = 1e-15);
        let d = TokenDistribution::imbalanced(4, 0.55).unwrap();
        let consts = event_constants(&d, 0.4);
        assert_abs_diff_eq!(consts.lower[0], 0.45, epsilon = 1e-15);
        assert_abs_diff_eq!(consts.lower[1], 0.6 - 0.4, epsilon = 1e-15);
    }

    #[test]
    fn tail_bound_examples() {
        let (k, c) = (3usize, 0.5f64);
        let n = (25.0 * 9.0 / 0.25) as usize;
        assert_eq!(multinomial_tail_bound(n, k, c), 1.0);
        assert_eq!(multinomial_tail_bound(100, 3, 0.0), 1.0);
        let mut prev = 1.0;
        for n in [1_000usize, 10_000, 100_000, 1_000_000] {
            let b = multinomial_tail_bound(n, 3, 0.5);
            assert!(b < prev);
            prev = b;
        }
        assert!(prev < 1e-100);
    }
}
