//! Synthetic representation matrices and dumps for desk-scale experiments.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dumps::{
    ActivationDump, DumpManifest, F32Matrix, PostNormStreams, SequenceRecord, UnembeddingBlock,
};
use crate::error::{domain, Result};
use crate::linalg::{gaussian_matrix, orthonormalize_columns, random_orthonormal, rng_from_seed};
use crate::spectral::{rmsnorm_rows, RepMatrix};

/// Covariance eigenvalue profiles used by the generators.
pub mod profiles {
    /// `d` equal eigenvalues.
    pub fn isotropic(d: usize) -> Vec<f64> {
        vec![1.0; d]
    }

    /// `exp(-rate · j)`.
    pub fn exponential(d: usize, rate: f64) -> Vec<f64> {
        (0..d).map(|j| (-rate * j as f64).exp()).collect()
    }

    /// Geometric sequence from `first` down to `last`.
    pub fn geometric(d: usize, first: f64, last: f64) -> Vec<f64> {
        if d == 1 {
            return vec![first];
        }
        let ratio = (last / first).ln() / (d - 1) as f64;
        (0..d).map(|j| first * (ratio * j as f64).exp()).collect()
    }

    /// One dominant outlier carrying `spike_share` of the bulk energy on top
    /// of `bulk` unit eigenvalues, followed by a small tail.
    ///
    /// Mimics the massive-activation channels seen in language models.
    pub fn outlier_bulk(d: usize, bulk: usize, spike_share: f64, tail: f64) -> Vec<f64> {
        let bulk = bulk.min(d.saturating_sub(1));
        let mut lam = vec![tail; d];
        if d == 0 {
            return lam;
        }
        lam[0] = spike_share * bulk as f64 / (1.0 - spike_share);
        for v in lam.iter_mut().skip(1).take(bulk) {
            *v = 1.0;
        }
        lam
    }

    /// Interpolates between isotropic (`t = 0`) and rank one (`t = 1`):
    /// `λ_0 = 1`, `λ_j = (1 − t)^(1 + 4j/d)`, so the tail also steepens.
    pub fn collapse(d: usize, t: f64) -> Vec<f64> {
        let t = t.clamp(0.0, 1.0);
        (0..d)
            .map(|j| {
                if j == 0 {
                    1.0
                } else {
                    (1.0 - t).powf(1.0 + 4.0 * j as f64 / d as f64)
                }
            })
            .collect()
    }
}

fn check_spectrum(d: usize, spectrum: &[f64]) -> Result<()> {
    if spectrum.len() > d {
        return Err(domain(format!(
            "spectrum has {} entries for hidden dim {d}",
            spectrum.len()
        )));
    }
    if spectrum.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(domain("spectrum entries must be finite and nonnegative"));
    }
    Ok(())
}

/// `C · diag(√λ) · B[:, :k]ᵀ` with unit-variance Gaussian coefficients `C`.
pub fn synth_in_basis<R: Rng + ?Sized>(
    l: usize,
    basis: &DMatrix<f64>,
    spectrum: &[f64],
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = basis.nrows();
    check_spectrum(d, spectrum)?;
    if basis.ncols() < spectrum.len() {
        return Err(domain("basis has fewer columns than spectrum entries"));
    }
    let k = spectrum.len();
    let mut coeffs = gaussian_matrix(l, k, 1.0, rng);
    for (j, lam) in spectrum.iter().enumerate() {
        coeffs.column_mut(j).scale_mut(lam.sqrt());
    }
    Ok(coeffs * basis.columns(0, k).transpose())
}

/// Random `L × D` matrix whose covariance eigenvalues follow `target_spectrum`
/// in a Haar-random orthonormal frame.
///
/// With a `cone_center`, rows with a negative inner product are negated;
/// this leaves `XᵀX` unchanged.
pub fn synth_matrix(
    l: usize,
    d: usize,
    target_spectrum: &[f64],
    cone_center: Option<&DVector<f64>>,
    seed: u64,
) -> Result<RepMatrix> {
    if l < 2 {
        return Err(domain(format!("need at least 2 rows, got {l}")));
    }
    if d == 0 {
        return Err(domain("hidden dim must be >= 1"));
    }
    check_spectrum(d, target_spectrum)?;
    if let Some(c) = cone_center {
        if c.len() != d || (c.norm() - 1.0).abs() > 1e-9 {
            return Err(domain("cone center must be a unit vector of length D"));
        }
    }
    let mut rng = rng_from_seed(seed);
    let basis = random_orthonormal(d, d, &mut rng);
    let mut x = synth_in_basis(l, &basis, target_spectrum, &mut rng)?;
    if let Some(c) = cone_center {
        for i in 0..l {
            if x.row(i).dot(&c.transpose()) < 0.0 {
                x.row_mut(i).neg_mut();
            }
        }
    }
    RepMatrix::new(x)
}

/// Orthonormal frame between a random channel permutation (`mix = 0`) and a
/// Haar-random rotation (`mix = 1`).
pub fn channel_mixed_basis<R: Rng + ?Sized>(d: usize, mix: f64, rng: &mut R) -> DMatrix<f64> {
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(rng);
    let haar = random_orthonormal(d, d, rng);
    let mut b = DMatrix::zeros(d, d);
    for (col, &row) in perm.iter().enumerate() {
        b[(row, col)] = 1.0;
    }
    orthonormalize_columns(b * (1.0 - mix) + haar * mix)
}

/// Preprocessed `L × D` sample for the autoencoder proxy: one outlier
/// channel, a unit bulk of `7D/16` directions and a small tail, in a
/// lightly mixed channel frame. eRank lands near `D/3`.
pub fn proxy_sample(l: usize, d: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = rng_from_seed(seed);
    let basis = channel_mixed_basis(d, 0.3, &mut rng);
    let spectrum = profiles::outlier_bulk(d, (7 * d / 16).max(1), 0.25, 1e-3);
    let raw = synth_in_basis(l, &basis, &spectrum, &mut rng)?;
    Ok(crate::spectral::preprocess(&RepMatrix::new(raw)?)?.data().clone())
}

/// Layer-wise spectrum schedule for synthetic dumps.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerProfile {
    /// Every layer uses the same eigenvalue profile.
    Fixed(Vec<f64>),
    /// Layer `i` of `N` uses `profiles::collapse(D, i / N)`.
    Collapse,
}

#[derive(Debug, Clone)]
pub struct SynthDumpConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_sequences: usize,
    pub seq_len: usize,
    pub profile: LayerProfile,
    /// Basis mixing, see [`channel_mixed_basis`].
    pub mix: f64,
    pub postnorm: bool,
    /// 0 stores no unembedding block.
    pub vocab_size: usize,
    pub label: String,
    pub seed: u64,
}

impl Default for SynthDumpConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            num_layers: 4,
            num_sequences: 4,
            seq_len: 64,
            profile: LayerProfile::Fixed(profiles::exponential(32, 0.15)),
            mix: 0.3,
            postnorm: false,
            vocab_size: 0,
            label: "synthetic".into(),
            seed: 0,
        }
    }
}

/// Builds a dump where all layers and sequences share one channel frame, so
/// channel importance is consistent across the archive.
pub fn synth_dump(cfg: &SynthDumpConfig) -> Result<ActivationDump> {
    let d = cfg.hidden_dim;
    if cfg.seq_len < 2 {
        return Err(domain("seq_len must be >= 2"));
    }
    if cfg.vocab_size == 1 {
        return Err(domain("vocab_size must be 0 or >= 2"));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let basis = channel_mixed_basis(d, cfg.mix, &mut rng);
    let n = cfg.num_layers;
    let spectrum_for = |i: usize| -> Vec<f64> {
        match &cfg.profile {
            LayerProfile::Fixed(s) => s.clone(),
            LayerProfile::Collapse => {
                let t = if n == 0 { 0.0 } else { i as f64 / n as f64 };
                profiles::collapse(d, t)
            }
        }
    };
    let ones = DVector::from_element(d, 1.0);
    let mut records = Vec::with_capacity(cfg.num_sequences);
    for _ in 0..cfg.num_sequences {
        let mut layers = Vec::with_capacity(n + 1);
        let mut dense = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let x = synth_in_basis(cfg.seq_len, &basis, &spectrum_for(i), &mut rng)?;
            layers.push(F32Matrix::from_dmatrix(&x));
            dense.push(x);
        }
        let postnorm = cfg.postnorm.then(|| {
            let attention = (1..=n)
                .map(|i| F32Matrix::from_dmatrix(&rmsnorm_rows(&dense[i - 1], &ones, 1e-6)))
                .collect();
            let ffn = (1..=n)
                .map(|i| {
                    let mid = (&dense[i - 1] + &dense[i]) * 0.5;
                    F32Matrix::from_dmatrix(&rmsnorm_rows(&mid, &ones, 1e-6))
                })
                .collect();
            PostNormStreams { attention, ffn }
        });
        records.push(SequenceRecord { layers, postnorm });
    }
    let unembedding = (cfg.vocab_size >= 2).then(|| random_unembedding(d, cfg.vocab_size, &mut rng));
    let mut manifest = DumpManifest::new(d, n, cfg.num_sequences);
    manifest.has_postnorm = cfg.postnorm;
    manifest.has_unembedding = unembedding.is_some();
    manifest.vocab_size = if unembedding.is_some() { cfg.vocab_size } else { 0 };
    manifest.model_label = cfg.label.clone();
    manifest.creation_metadata = format!("synthetic seed={}", cfg.seed);
    ActivationDump::new(manifest, records, unembedding)
}

/// Gains near one, `W_u` with `N(0, 1/D)` entries, epsilon `1e-6`.
pub fn random_unembedding<R: Rng + ?Sized>(d: usize, voc: usize, rng: &mut R) -> UnembeddingBlock {
    let g_final = (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (1.0 + 0.1 * z) as f32
        })
        .collect();
    let w = gaussian_matrix(d, voc, 1.0 / (d as f64).sqrt(), rng);
    UnembeddingBlock {
        g_final,
        epsilon: 1e-6,
        w_u: F32Matrix::from_dmatrix(&w),
    }
}
