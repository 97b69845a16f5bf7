//! Masked one-layer softmax attention with the value head fixed to the label
//! row, plus the reduction of the key-query matrix to bilinear weights.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{FeatureBasis, Prompt, PromptCounts};

/// `(d+1) x (N+1)` prompt embedding. Column `i < N` holds `(x_i; y_i)`,
/// the last column holds `(x_query; 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    matrix: DMatrix<f64>,
}

impl Embedding {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows() - 1
    }

    pub fn num_tokens(&self) -> usize {
        self.matrix.ncols() - 1
    }

    pub fn labels(&self) -> Vec<f64> {
        let d = self.dim();
        self.matrix.row(d).iter().copied().collect()
    }
}

pub fn embed(prompt: &Prompt, basis: &FeatureBasis) -> Result<Embedding> {
    let w = prompt.task.as_ref().ok_or(Error::MissingTask)?;
    let d = basis.dim();
    let k = basis.num_features();
    if w.len() != d {
        return Err(Error::Dimension(format!(
            "task vector has length {}, basis dimension is {d}",
            w.len()
        )));
    }
    if prompt.query >= k || prompt.tokens.iter().any(|&t| t >= k) {
        return Err(Error::InvalidPrompt(format!(
            "feature index out of range for K={k}"
        )));
    }
    let n = prompt.tokens.len();
    let mut matrix = DMatrix::zeros(d + 1, n + 1);
    for (i, &tok) in prompt.tokens.iter().enumerate() {
        let v = basis.vector(tok);
        matrix.view_mut((0, i), (d, 1)).copy_from(&v);
        matrix[(d, i)] = v.dot(w);
    }
    matrix
        .view_mut((0, n), (d, 1))
        .copy_from(&basis.vector(prompt.query));
    Ok(Embedding { matrix })
}

/// Per-token attention of the query over the `N` unmasked tokens.
pub fn token_attention(emb: &Embedding, q: &DMatrix<f64>) -> Result<Vec<f64>> {
    let d = emb.dim();
    let n = emb.num_tokens();
    if q.nrows() != d || q.ncols() != d {
        return Err(Error::Dimension(format!(
            "Q must be {d}x{d}, got {}x{}",
            q.nrows(),
            q.ncols()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidPrompt("prompt has no tokens".into()));
    }
    let x = emb.matrix.rows(0, d);
    let qx = q * x.column(n);
    let logits: Vec<f64> = (0..n).map(|i| x.column(i).dot(&qx)).collect();
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("non-finite attention logits".into()));
    }
    Ok(softmax(&logits))
}

/// Prediction for the query slot: the label row weighted by attention.
pub fn forward(emb: &Embedding, q: &DMatrix<f64>) -> Result<f64> {
    let attn = token_attention(emb, q)?;
    let d = emb.dim();
    Ok(attn
        .iter()
        .enumerate()
        .map(|(i, a)| a * emb.matrix[(d, i)])
        .sum())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Bilinear attention weights `M[n,k] = v_n^T Q v_k`.
///
/// For query feature `k`, `A(k) = M[k,k]` weights tokens of the same feature
/// and `B(k,n) = M[n,k]` weights tokens of feature `n != k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReducedWeights {
    #[serde(serialize_with = "crate::report::serialize_matrix")]
    matrix: DMatrix<f64>,
}

impl ReducedWeights {
    pub fn zeros(k: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(k, k),
        }
    }

    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::Dimension("reduced weights must be square".into()));
        }
        Ok(Self { matrix })
    }

    pub fn num_features(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.matrix
    }

    pub fn a(&self, k: usize) -> f64 {
        self.matrix[(k, k)]
    }

    pub fn b(&self, k: usize, n: usize) -> f64 {
        self.matrix[(n, k)]
    }

    pub fn set_a(&mut self, k: usize, value: f64) {
        self.matrix[(k, k)] = value;
    }

    pub fn set_b(&mut self, k: usize, n: usize, value: f64) {
        self.matrix[(n, k)] = value;
    }

    /// `max_{m != k} B(k, m)`; `-inf` when `K = 1`.
    pub fn max_b(&self, k: usize) -> f64 {
        (0..self.num_features())
            .filter(|&m| m != k)
            .map(|m| self.b(k, m))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.matrix.iter().all(|x| x.is_finite())
    }
}

pub fn reduce(q: &DMatrix<f64>, basis: &FeatureBasis) -> ReducedWeights {
    let v = basis.matrix();
    ReducedWeights {
        matrix: v.transpose() * q * v,
    }
}

/// `Q = V M V^T`, the unique key-query matrix supported on the feature span
/// that reduces to `M`.
pub fn lift(weights: &ReducedWeights, basis: &FeatureBasis) -> DMatrix<f64> {
    let v = basis.matrix();
    v * weights.matrix() * v.transpose()
}

/// Attention mass per feature, `Attn_m = sum of attn_i over tokens of feature m`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionProfile {
    pub query: usize,
    pub scores: Vec<f64>,
    pub token_scores: Option<Vec<f64>>,
}

impl AttentionProfile {
    pub fn score(&self, k: usize) -> f64 {
        self.scores[k]
    }

    /// `1 - Attn_query`.
    pub fn miss(&self) -> f64 {
        1.0 - self.scores[self.query]
    }
}

/// `Attn_m = n_m exp(M[m,k]) / sum_j n_j exp(M[j,k])`, computed in log space.
/// Features with `n_m = 0` get exactly zero.
pub fn attention_profile(
    counts: &PromptCounts,
    query: usize,
    weights: &ReducedWeights,
) -> Result<AttentionProfile> {
    let k = weights.num_features();
    if counts.num_features() != k || query >= k {
        return Err(Error::Dimension(format!(
            "counts for {} features, weights for {k}, query {query}",
            counts.num_features()
        )));
    }
    if counts.total() == 0 {
        return Err(Error::InvalidPrompt("all counts are zero".into()));
    }
    let mut scores = vec![0.0; k];
    log_space_profile(counts.counts(), weights.matrix().column(query).as_slice(), &mut scores);
    Ok(AttentionProfile {
        query,
        scores,
        token_scores: None,
    })
}

/// Writes `Attn` for count vector `counts` and logit column `logits` into `out`.
pub(crate) fn log_space_profile<C: Copy + Into<u64>>(counts: &[C], logits: &[f64], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (m, &c) in counts.iter().enumerate() {
        let c: u64 = c.into();
        if c > 0 {
            max = max.max((c as f64).ln() + logits[m]);
        }
    }
    let mut total = 0.0;
    for (m, &c) in counts.iter().enumerate() {
        let c: u64 = c.into();
        out[m] = if c > 0 {
            ((c as f64).ln() + logits[m] - max).exp()
        } else {
            0.0
        };
        total += out[m];
    }
    for x in out.iter_mut() {
        *x /= total;
    }
}

/// Profile computed from a concrete prompt through the per-token softmax.
pub fn token_profile(prompt: &Prompt, q: &DMatrix<f64>, basis: &FeatureBasis) -> Result<AttentionProfile> {
    let mut with_task = prompt.clone();
    if with_task.task.is_none() {
        with_task.task = Some(DVector::zeros(basis.dim()));
    }
    let emb = embed(&with_task, basis)?;
    let attn = token_attention(&emb, q)?;
    let mut scores = vec![0.0; basis.num_features()];
    for (&tok, a) in prompt.tokens.iter().zip(&attn) {
        scores[tok] += a;
    }
    Ok(AttentionProfile {
        query: prompt.query,
        scores,
        token_scores: Some(attn),
    })
}

/// `y_hat = sum_k Attn_k <w, v_k>`.
pub fn predict_from_profile(profile: &AttentionProfile, w: &DVector<f64>, basis: &FeatureBasis) -> f64 {
    profile
        .scores
        .iter()
        .enumerate()
        .map(|(k, a)| a * basis.vector(k).dot(w))
        .sum()
}
