//! Representation preprocessing and spectral / distinguishability diagnostics.
//!
//! The effective rank of a token-representation matrix `X` (`L × D`) is the
//! exponential of the Shannon entropy of its normalized covariance spectrum:
//!
//! ```text
//! λ_j = σ_j(X)² / L,   p_j = λ_j / Σ_k λ_k,   eRank = exp(−Σ_j p_j ln p_j)
//! ```
//!
//! On a row-normalized matrix the largest absolute cosine between two
//! distinct rows is bounded below by `√((L/eRank − 1)/(L − 1))`, and the
//! closest pair of output distributions is bounded above in total variation
//! through the spectral norm of the scaled unembedding. Both bounds are
//! exposed here next to the brute-force quantities they bound.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::linalg::{self, row_vec, softmax};

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const EIGEN_CLAMP: f64 = 1e-12;

/// An `L × D` token-representation matrix with `L ≥ 2` and finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RepMatrix {
    data: DMatrix<f64>,
}

impl RepMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(domain(format!("need at least 2 rows, got {}", data.nrows())));
        }
        if data.ncols() == 0 {
            return Err(domain("need at least 1 column"));
        }
        if !linalg::all_finite(&data) {
            return Err(Error::Data("non-finite entry in representation matrix".into()));
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let l = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(shape("ragged rows"));
        }
        Self::new(DMatrix::from_fn(l, d, |i, j| rows[i][j]))
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }
}

/// A zero-centered (columns) then row-normalized representation matrix.
///
/// Centering happens first, so after normalization the column means are
/// generally not exactly zero; the largest one is kept in
/// `centering_residual`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreppedMatrix {
    data: DMatrix<f64>,
    centering_residual: f64,
}

impl PreppedMatrix {
    /// Wraps a matrix whose rows are already unit-norm, without centering.
    pub fn from_normalized(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(domain("need at least 2 rows"));
        }
        for (i, row) in data.row_iter().enumerate() {
            if (row.norm() - 1.0).abs() > 1e-9 {
                return Err(domain(format!("row {i} is not unit norm")));
            }
        }
        let centering_residual = max_abs_column_mean(&data);
        Ok(Self {
            data,
            centering_residual,
        })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn centering_residual(&self) -> f64 {
        self.centering_residual
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }
}

fn max_abs_column_mean(m: &DMatrix<f64>) -> f64 {
    let l = m.nrows() as f64;
    m.column_iter()
        .map(|c| (c.sum() / l).abs())
        .fold(0.0, f64::max)
}

/// Centers columns, then scales every row to unit Euclidean norm.
pub fn preprocess(x: &RepMatrix) -> Result<PreppedMatrix> {
    let mut data = x.data.clone();
    let l = data.nrows() as f64;
    for mut col in data.column_iter_mut() {
        let mean = col.sum() / l;
        col.add_scalar_mut(-mean);
    }
    for (i, mut row) in data.row_iter_mut().enumerate() {
        let n = row.norm();
        if n <= 1e-12 {
            return Err(Error::DegenerateRow { row: i });
        }
        row /= n;
    }
    let centering_residual = max_abs_column_mean(&data);
    Ok(PreppedMatrix {
        data,
        centering_residual,
    })
}

/// Covariance spectrum and its effective rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    /// `λ_j`, descending, padded with zeros to length `D`.
    pub eigenvalues: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub erank: f64,
    /// `Σ p_j²`.
    pub collision_probability: f64,
}

impl SpectrumSummary {
    /// Number of strictly positive (post-clamp) eigenvalues.
    pub fn numerical_rank(&self) -> usize {
        self.eigenvalues.iter().filter(|&&l| l > 0.0).count()
    }
}

/// Effective rank of `x` (natural log entropy, `0·ln 0 = 0`).
pub fn erank(x: &DMatrix<f64>) -> Result<SpectrumSummary> {
    if x.nrows() < 2 {
        return Err(domain(format!("erank needs L >= 2, got {}", x.nrows())));
    }
    if !linalg::all_finite(x) {
        return Err(Error::Data("non-finite entry".into()));
    }
    let l = x.nrows() as f64;
    let eigenvalues: Vec<f64> = linalg::singular_values(x)
        .into_iter()
        .map(|s| s * s / l)
        .collect();
    summarize_spectrum(eigenvalues, x.ncols())
}

/// Effective rank of a data set given only its second-moment matrix.
pub fn erank_from_moment(moment: &DMatrix<f64>) -> Result<SpectrumSummary> {
    if !moment.is_square() {
        return Err(domain("second-moment matrix must be square"));
    }
    if !linalg::all_finite(moment) {
        return Err(Error::Data("non-finite entry".into()));
    }
    let sym = (moment + moment.transpose()) * 0.5;
    let eig: Vec<f64> = sym
        .symmetric_eigenvalues()
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    summarize_spectrum(eig, moment.nrows())
}

fn summarize_spectrum(mut eigenvalues: Vec<f64>, d: usize) -> Result<SpectrumSummary> {
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    eigenvalues.resize(d, 0.0);
    let lmax = eigenvalues.first().copied().unwrap_or(0.0);
    if lmax <= 0.0 {
        return Err(Error::Degenerate("all-zero matrix has no spectrum".into()));
    }
    for v in eigenvalues.iter_mut() {
        if *v < EIGEN_CLAMP * lmax {
            *v = 0.0;
        }
    }
    let total: f64 = eigenvalues.iter().sum();
    let probabilities: Vec<f64> = eigenvalues.iter().map(|v| v / total).collect();
    let entropy: f64 = probabilities
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    let collision_probability = probabilities.iter().map(|p| p * p).sum();
    Ok(SpectrumSummary {
        eigenvalues,
        probabilities,
        erank: entropy.exp(),
        collision_probability,
    })
}

/// A scalar attained by a specific pair of rows `(first, second)`,
/// `first < second`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairValue {
    pub value: f64,
    pub pair: (usize, usize),
}

/// Largest `|⟨X^a, X^b⟩|` over distinct rows; ties go to the
/// lexicographically smallest pair.
pub fn max_abs_cosine(x: &PreppedMatrix) -> PairValue {
    let (l, d) = x.data.shape();
    let mut best = PairValue {
        value: f64::NEG_INFINITY,
        pair: (0, 1),
    };
    for a in 0..l {
        for b in (a + 1)..l {
            let v = (0..d)
                .map(|j| x.data[(a, j)] * x.data[(b, j)])
                .sum::<f64>()
                .abs();
            if v > best.value {
                best = PairValue {
                    value: v,
                    pair: (a, b),
                };
            }
        }
    }
    best.value = best.value.min(1.0);
    best
}

/// Lower bound on the largest absolute cosine similarity implied by the
/// effective rank: `√((L/eRank − 1)/(L − 1))`, clamped to `[0, 1]`.
pub fn rep_bound(l: usize, erank: f64) -> Result<f64> {
    if l < 2 {
        return Err(domain(format!("rep_bound needs L >= 2, got {l}")));
    }
    let lf = l as f64;
    if !erank.is_finite() || erank > lf * (1.0 + 1e-12) {
        return Err(domain(format!("erank {erank} exceeds L = {l}")));
    }
    if erank < 1.0 - 1e-9 {
        return Err(domain(format!("erank {erank} below 1")));
    }
    let inner = (lf / erank - 1.0) / (lf - 1.0);
    Ok(inner.max(0.0).sqrt().clamp(0.0, 1.0))
}

/// `½ Σ |p_j − q_j|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(domain(format!("length mismatch: {} vs {}", p.len(), q.len())));
    }
    for (name, v) in [("p", p), ("q", q)] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-6 || v.iter().any(|x| *x < -1e-12) {
            return Err(domain(format!("{name} is not on the simplex (sum {s})")));
        }
    }
    Ok(tv_unchecked(p, q))
}

fn tv_unchecked(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..logits.nrows())
        .map(|i| softmax(&row_vec(logits, i)))
        .collect()
}

/// Smallest total-variation distance between the softmax distributions of
/// two distinct rows.
pub fn min_tv(logits: &DMatrix<f64>) -> Result<PairValue> {
    if logits.nrows() < 2 {
        return Err(domain("min_tv needs at least 2 rows"));
    }
    let probs = softmax_rows(logits);
    let mut best = PairValue {
        value: f64::INFINITY,
        pair: (0, 1),
    };
    for a in 0..probs.len() {
        for b in (a + 1)..probs.len() {
            let v = tv_unchecked(&probs[a], &probs[b]);
            if v < best.value {
                best = PairValue {
                    value: v,
                    pair: (a, b),
                };
            }
        }
    }
    Ok(best)
}

/// Upper bound on the minimum TV distance between token distributions:
/// `(√Voc / 2) · ‖diag(g) W_u‖₂ · √(2 − 2·rep_bound(L, eRank))`.
pub fn prob_bound(l: usize, erank: f64, voc: usize, scaled_unembedding_norm: f64) -> Result<f64> {
    if voc == 0 || scaled_unembedding_norm.is_nan() || scaled_unembedding_norm < 0.0 {
        return Err(domain("prob_bound needs positive vocabulary and a nonnegative norm"));
    }
    let rho = rep_bound(l, erank)?;
    Ok(0.5 * (voc as f64).sqrt() * scaled_unembedding_norm * (2.0 - 2.0 * rho).max(0.0).sqrt())
}

/// Final-norm gain, epsilon and unembedding in `f64`, ready for logit
/// computation.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitHead {
    pub gain: DVector<f64>,
    pub eps: f64,
    /// `D × Voc`.
    pub w_u: DMatrix<f64>,
}

impl LogitHead {
    pub fn new(gain: DVector<f64>, eps: f64, w_u: DMatrix<f64>) -> Result<Self> {
        if gain.len() != w_u.nrows() {
            return Err(shape(format!(
                "gain length {} vs unembedding rows {}",
                gain.len(),
                w_u.nrows()
            )));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(domain("epsilon must be positive"));
        }
        Ok(Self { gain, eps, w_u })
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_u.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.w_u.ncols()
    }

    /// `‖diag(g) W_u‖₂`.
    pub fn scaled_spectral_norm(&self) -> f64 {
        let mut scaled = self.w_u.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= self.gain[i];
        }
        linalg::spectral_norm(&scaled)
    }
}

/// `x / √(‖x‖²/D + ε) ⊙ g`.
pub fn rmsnorm(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    assert_eq!(x.len(), g.len(), "rmsnorm: input and gain lengths differ");
    let d = x.len() as f64;
    let ms = x.iter().map(|v| v * v).sum::<f64>() / d;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, w)| v * inv * w).collect()
}

/// Row-wise RMSNorm of a matrix.
pub fn rmsnorm_rows(x: &DMatrix<f64>, g: &DVector<f64>, eps: f64) -> DMatrix<f64> {
    assert_eq!(x.ncols(), g.len(), "rmsnorm_rows: width and gain length differ");
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let ms = row.norm_squared() / d;
        let inv = 1.0 / (ms + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v *= inv * g[j];
        }
    }
    out
}

/// `RMSNorm_final(X) W_u`.
pub fn logits(x: &DMatrix<f64>, head: &LogitHead) -> Result<DMatrix<f64>> {
    if x.ncols() != head.hidden_dim() {
        return Err(domain(format!(
            "representation width {} does not match unembedding rows {}",
            x.ncols(),
            head.hidden_dim()
        )));
    }
    Ok(rmsnorm_rows(x, &head.gain, head.eps) * &head.w_u)
}

/// Per-token Shannon entropy of the softmax distributions and its mean.
pub fn token_entropy(logits: &DMatrix<f64>) -> (Vec<f64>, f64) {
    let per_token: Vec<f64> = softmax_rows(logits)
        .iter()
        .map(|p| {
            p.iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| -v * v.ln())
                .sum::<f64>()
        })
        .collect();
    let mean = if per_token.is_empty() {
        0.0
    } else {
        per_token.iter().sum::<f64>() / per_token.len() as f64
    };
    (per_token, mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub is_rank1: bool,
    /// `sign(X^l · X^1)` per row; empty unless `is_rank1`.
    pub sign_pattern: Vec<i8>,
    /// `max_l ‖X^l − s_l X^1‖`; zero unless `is_rank1`.
    pub residual: f64,
    pub sigma_ratio: f64,
}

/// Detects the binary-state limit: `σ₂/σ₁ < tol` means every row is `±X¹`.
pub fn binary_collapse_check(x: &PreppedMatrix, tol: f64) -> Result<CollapseReport> {
    let s = linalg::singular_values(&x.data);
    let s1 = s.first().copied().unwrap_or(0.0);
    if s1 <= 0.0 {
        return Err(Error::Degenerate("largest singular value is zero".into()));
    }
    let sigma_ratio = s.get(1).copied().unwrap_or(0.0) / s1;
    if sigma_ratio >= tol {
        return Ok(CollapseReport {
            is_rank1: false,
            sign_pattern: Vec::new(),
            residual: 0.0,
            sigma_ratio,
        });
    }
    let first = x.data.row(0);
    let mut sign_pattern = Vec::with_capacity(x.rows());
    let mut residual = 0.0f64;
    for row in x.data.row_iter() {
        let sign: i8 = if row.dot(&first) >= 0.0 { 1 } else { -1 };
        let diff = (row - first * f64::from(sign)).norm();
        residual = residual.max(diff);
        sign_pattern.push(sign);
    }
    Ok(CollapseReport {
        is_rank1: true,
        sign_pattern,
        residual,
        sigma_ratio,
    })
}

/// Number of distinct rows, where rows within `tol` (max-abs) of an earlier
/// representative are merged.
pub fn distinct_rows(m: &DMatrix<f64>, tol: f64) -> usize {
    let mut reps: Vec<usize> = Vec::new();
    for i in 0..m.nrows() {
        let dup = reps.iter().any(|&r| {
            m.row(i)
                .iter()
                .zip(m.row(r).iter())
                .all(|(a, b)| (a - b).abs() <= tol)
        });
        if !dup {
            reps.push(i);
        }
    }
    reps.len()
}

/// Whether the most similar pair (by absolute cosine) points the same way,
/// the geometric premise of the probability-distinguishability bound.
pub fn closest_pair_codirectional(x: &PreppedMatrix) -> bool {
    let best = max_abs_cosine(x);
    let (a, b) = best.pair;
    x.data.row(a).dot(&x.data.row(b)) >= 0.0
}
