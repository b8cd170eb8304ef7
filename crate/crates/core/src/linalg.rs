//! Dense linear-algebra helpers shared by the analysis modules.
//!
//! Everything is `f64` and `nalgebra::DMatrix`; row-major conventions only
//! appear at the dump boundary.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministic RNG used throughout the crate.
pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Thin SVD with singular values sorted descending.
///
/// Singular vectors are oriented so that the first component of each left
/// vector whose magnitude exceeds `1e-12` is positive; the matching right
/// vector is flipped along with it so `M v = σ u` still holds.
#[derive(Debug, Clone)]
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub fn sorted_svd(m: &DMatrix<f64>) -> SortedSvd {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    let s = svd.singular_values;

    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));

    let k = order.len();
    let mut us = DMatrix::zeros(u.nrows(), k);
    let mut vs = DMatrix::zeros(v_t.ncols(), k);
    let mut ss = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut uc = u.column(src).into_owned();
        let mut vc = v_t.row(src).transpose();
        if let Some(first) = uc.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                uc.neg_mut();
                vc.neg_mut();
            }
        }
        us.set_column(dst, &uc);
        vs.set_column(dst, &vc);
        ss[dst] = s[src].max(0.0);
    }
    SortedSvd {
        u: us,
        singular_values: ss,
        v: vs,
    }
}

/// Singular values, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m
        .clone()
        .singular_values()
        .iter()
        .map(|x| x.max(0.0))
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

pub fn gaussian_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    // Column-major fill order; fixed so seeds stay reproducible.
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Orthonormalizes the columns of `m` with a sign-fixed Householder QR, so a
/// Gaussian input yields a Haar-distributed frame.
pub fn orthonormalize_columns(m: DMatrix<f64>) -> DMatrix<f64> {
    let k = m.ncols().min(m.nrows());
    let qr = m.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `d × k` matrix with orthonormal columns drawn from the Haar measure.
pub fn random_orthonormal<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> DMatrix<f64> {
    orthonormalize_columns(gaussian_matrix(d, k, 1.0, rng))
}

/// `(1/L) XᵀX`.
pub fn second_moment(x: &DMatrix<f64>) -> DMatrix<f64> {
    let l = x.nrows() as f64;
    x.tr_mul(x) / l
}

/// Pearson correlation; `None` when either side has zero variance or the
/// inputs are shorter than two.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let scale = x
        .iter()
        .chain(y)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let tiny = 1e-24 * scale * scale * n;
    if sxx <= tiny || syy <= tiny {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// `max_ij |a_ij - b_ij|`.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Natural-log `log Σ exp(z)`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub(crate) fn row_vec(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_svd_reconstructs() {
        let mut rng = rng_from_seed(3);
        let m = gaussian_matrix(7, 5, 1.0, &mut rng);
        let svd = sorted_svd(&m);
        let s = DMatrix::from_diagonal(&svd.singular_values);
        let back = &svd.u * s * svd.v.transpose();
        assert!(max_abs_diff(&back, &m) < 1e-12);
        for w in svd.singular_values.as_slice().windows(2) {
            assert!(w[0] >= w[1]);
        }
        for j in 0..svd.u.ncols() {
            let first = svd.u.column(j).iter().find(|x| x.abs() > 1e-12).copied();
            assert!(first.unwrap() > 0.0);
        }
    }

    #[test]
    fn random_orthonormal_is_orthonormal() {
        let mut rng = rng_from_seed(11);
        let q = random_orthonormal(9, 4, &mut rng);
        let g = q.tr_mul(&q);
        assert!(max_abs_diff(&g, &DMatrix::identity(4, 4)) < 1e-12);
    }

    #[test]
    fn pearson_edge_cases() {
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let r = pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1] && p[1] > p[2]);
    }
}
