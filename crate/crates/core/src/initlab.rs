//! Channel importance estimation and projection-pair initialization.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dumps::{ActivationDump, F32Matrix};
use crate::error::{domain, Error, Result};
use crate::flowsim::ProjectionPair;
use crate::linalg::{gaussian_matrix, random_orthonormal, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MeanAbs,
    Postnorm,
    QrPivot,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::MeanAbs, Strategy::Postnorm, Strategy::QrPivot];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::MeanAbs => "mean_abs",
            Strategy::Postnorm => "postnorm",
            Strategy::QrPivot => "qr_pivot",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| domain(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub scores: Vec<f64>,
    pub strategy: Strategy,
    pub num_layers_used: usize,
    pub num_sequences_used: usize,
}

/// Sorted channel indices of a reduced-width student.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSelection {
    indices: Vec<usize>,
    dim: usize,
    strategy: Option<Strategy>,
}

impl ChannelSelection {
    /// Validates and sorts `indices`; they must be distinct and below `dim`.
    pub fn new(mut indices: Vec<usize>, dim: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.is_empty() {
            return Err(domain("selection must not be empty"));
        }
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(domain("selection indices must be distinct"));
        }
        if let Some(&last) = indices.last() {
            if last >= dim {
                return Err(domain(format!("index {last} out of range for width {dim}")));
            }
        }
        Ok(Self {
            indices,
            dim,
            strategy: None,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn strategy(&self) -> Option<Strategy> {
        self.strategy
    }
}

/// `(1/L) Σ_l |x_lj|` per channel.
fn channel_mean_abs(m: &F32Matrix) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    for (i, v) in m.as_slice().iter().enumerate() {
        acc[i % m.cols()] += f64::from(v.abs());
    }
    let l = m.rows() as f64;
    acc.into_iter().map(|a| a / l).collect()
}

/// For each stream, L2 over sequences of the per-sequence score; then the
/// mean over streams.
fn aggregate(per_stream_per_seq: &[Vec<Vec<f64>>], d: usize) -> Vec<f64> {
    let mut total = vec![0.0; d];
    for stream in per_stream_per_seq {
        for (j, t) in total.iter_mut().enumerate() {
            *t += stream.iter().map(|s| s[j] * s[j]).sum::<f64>().sqrt();
        }
    }
    let n = per_stream_per_seq.len() as f64;
    total.into_iter().map(|t| t / n).collect()
}

fn check_nonempty(dump: &ActivationDump) -> Result<()> {
    if dump.records.is_empty() {
        return Err(domain("dump holds no sequences"));
    }
    Ok(())
}

/// Mean absolute activation over layer outputs `0..=N`.
pub fn importance_mean_abs(dump: &ActivationDump) -> Result<ImportanceReport> {
    check_nonempty(dump)?;
    let streams: Vec<Vec<Vec<f64>>> = (0..dump.num_stored_layers())
        .map(|i| {
            dump.records
                .iter()
                .map(|r| channel_mean_abs(&r.layers[i]))
                .collect()
        })
        .collect();
    Ok(ImportanceReport {
        scores: aggregate(&streams, dump.hidden_dim()),
        strategy: Strategy::MeanAbs,
        num_layers_used: streams.len(),
        num_sequences_used: dump.records.len(),
    })
}

/// Mean absolute activation over the `2N` normalization outputs.
pub fn importance_postnorm(dump: &ActivationDump) -> Result<ImportanceReport> {
    check_nonempty(dump)?;
    if !dump.manifest.has_postnorm {
        return Err(Error::Capability(
            "postnorm strategy needs a dump with post-norm streams".into(),
        ));
    }
    let n = dump.manifest.num_layers;
    if n == 0 {
        return Err(Error::Capability("dump has no transformer blocks".into()));
    }
    let mut streams = Vec::with_capacity(2 * n);
    for i in 0..n {
        for attention in [true, false] {
            let per_seq = dump
                .records
                .iter()
                .map(|r| {
                    let pn = r.postnorm.as_ref().expect("validated dump");
                    channel_mean_abs(if attention { &pn.attention[i] } else { &pn.ffn[i] })
                })
                .collect();
            streams.push(per_seq);
        }
    }
    Ok(ImportanceReport {
        scores: aggregate(&streams, dump.hidden_dim()),
        strategy: Strategy::Postnorm,
        num_layers_used: streams.len(),
        num_sequences_used: dump.records.len(),
    })
}

/// Greedy column-pivoted QR.
#[derive(Debug, Clone, PartialEq)]
pub struct PivotedQr {
    /// Columns in the order they were selected.
    pub order: Vec<usize>,
    /// `|R_tt|` attributed to the original column; 0 for columns never
    /// selected before the residual vanished.
    pub scores: Vec<f64>,
}

/// Modified Gram-Schmidt with max-residual-norm pivoting. Ties go to the
/// lower column index; stops once every residual is below `1e-12` of the
/// largest initial column norm.
pub fn pivoted_qr(a: &DMatrix<f64>) -> Result<PivotedQr> {
    let d = a.ncols();
    let mut resid = a.clone();
    let mut norms: Vec<f64> = (0..d).map(|j| resid.column(j).norm()).collect();
    let top = norms.iter().copied().fold(0.0, f64::max);
    if top == 0.0 || !top.is_finite() {
        return Err(Error::Degenerate("matrix has rank 0".into()));
    }
    let tol = 1e-12 * top;
    let mut active = vec![true; d];
    let mut order = Vec::new();
    let mut scores = vec![0.0; d];
    for _ in 0..d.min(a.nrows()) {
        let mut best: Option<usize> = None;
        for j in (0..d).filter(|&j| active[j]) {
            if best.is_none_or(|b| norms[j] > norms[b]) {
                best = Some(j);
            }
        }
        let Some(p) = best else { break };
        if norms[p] <= tol {
            break;
        }
        active[p] = false;
        order.push(p);
        scores[p] = norms[p];
        let q = resid.column(p) / norms[p];
        for j in (0..d).filter(|&j| active[j]) {
            let c = q.dot(&resid.column(j));
            resid.column_mut(j).axpy(-c, &q, 1.0);
            norms[j] = resid.column(j).norm();
        }
    }
    Ok(PivotedQr { order, scores })
}

/// Per layer, pivoted QR on all sequences stacked; then the mean over layers
/// of the per-layer scores (the single stacked matrix plays the role of the
/// sequence axis).
pub fn importance_qr(dump: &ActivationDump) -> Result<ImportanceReport> {
    check_nonempty(dump)?;
    let d = dump.hidden_dim();
    let total_rows: usize = dump.records.iter().map(|r| r.seq_len()).sum();
    let mut streams = Vec::with_capacity(dump.num_stored_layers());
    for i in 0..dump.num_stored_layers() {
        let mut a = DMatrix::zeros(total_rows, d);
        let mut offset = 0;
        for r in &dump.records {
            let m = r.layers[i].to_dmatrix();
            a.rows_mut(offset, m.nrows()).copy_from(&m);
            offset += m.nrows();
        }
        let qr = pivoted_qr(&a)
            .map_err(|_| Error::Degenerate(format!("layer {i} activations have rank 0")))?;
        streams.push(vec![qr.scores]);
    }
    Ok(ImportanceReport {
        scores: aggregate(&streams, d),
        strategy: Strategy::QrPivot,
        num_layers_used: streams.len(),
        num_sequences_used: dump.records.len(),
    })
}

pub fn importance(dump: &ActivationDump, strategy: Strategy) -> Result<ImportanceReport> {
    match strategy {
        Strategy::MeanAbs => importance_mean_abs(dump),
        Strategy::Postnorm => importance_postnorm(dump),
        Strategy::QrPivot => importance_qr(dump),
    }
}

/// Indices of the `dprime` largest scores, ties toward the smaller index,
/// returned ascending.
pub fn select_topk(report: &ImportanceReport, dprime: usize) -> Result<ChannelSelection> {
    let d = report.scores.len();
    if dprime == 0 || dprime >= d {
        return Err(domain(format!("dprime must be in 1..{d}, got {dprime}")));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        report.scores[b]
            .total_cmp(&report.scores[a])
            .then(a.cmp(&b))
    });
    order.truncate(dprime);
    let mut sel = ChannelSelection::new(order, d)?;
    sel.strategy = Some(report.strategy);
    Ok(sel)
}

/// `Q = H`, `O = Hᵀ` with `H_ij = 1` iff `i = G_j`.
pub fn build_selection_pair(sel: &ChannelSelection, d: usize) -> Result<ProjectionPair> {
    if sel.indices.iter().any(|&i| i >= d) {
        return Err(domain(format!("selection index out of range for width {d}")));
    }
    let mut h = DMatrix::zeros(d, sel.len());
    for (j, &i) in sel.indices.iter().enumerate() {
        h[(i, j)] = 1.0;
    }
    let o = h.transpose();
    ProjectionPair::new(h, o)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitKind {
    ChannelSelect { indices: Vec<usize> },
    Gaussian { std: f64 },
    Orthogonal,
}

impl InitKind {
    pub fn name(&self) -> &'static str {
        match self {
            InitKind::ChannelSelect { .. } => "channel_select",
            InitKind::Gaussian { .. } => "gaussian",
            InitKind::Orthogonal => "orthogonal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub kind: InitKind,
    pub seed: u64,
}

impl InitSpec {
    pub fn gaussian(std: f64, seed: u64) -> Self {
        Self {
            kind: InitKind::Gaussian { std },
            seed,
        }
    }

    pub fn orthogonal(seed: u64) -> Self {
        Self {
            kind: InitKind::Orthogonal,
            seed,
        }
    }

    pub fn selection(sel: &ChannelSelection) -> Self {
        Self {
            kind: InitKind::ChannelSelect {
                indices: sel.indices.clone(),
            },
            seed: 0,
        }
    }
}

/// Builds the pair described by `spec`. Gaussian draws `Q` then `O`;
/// orthogonal takes `O = Qᵀ`.
pub fn build_pair(spec: &InitSpec, d: usize, dprime: usize) -> Result<ProjectionPair> {
    if dprime == 0 || dprime > d {
        return Err(domain(format!("dprime must be in 1..={d}, got {dprime}")));
    }
    let mut rng = rng_from_seed(spec.seed);
    match &spec.kind {
        InitKind::Gaussian { std } => {
            if *std <= 0.0 || !std.is_finite() {
                return Err(domain("gaussian std must be positive"));
            }
            let q = gaussian_matrix(d, dprime, *std, &mut rng);
            let o = gaussian_matrix(dprime, d, *std, &mut rng);
            ProjectionPair::new(q, o)
        }
        InitKind::Orthogonal => {
            let q = random_orthonormal(d, dprime, &mut rng);
            let o = q.transpose();
            ProjectionPair::new(q, o)
        }
        InitKind::ChannelSelect { indices } => {
            let sel = ChannelSelection::new(indices.clone(), d)?;
            if sel.len() != dprime {
                return Err(domain(format!(
                    "selection has {} channels, expected {dprime}",
                    sel.len()
                )));
            }
            build_selection_pair(&sel, d)
        }
    }
}

/// `|A ∩ B| / D′`.
pub fn overlap_ratio(a: &ChannelSelection, b: &ChannelSelection) -> Result<f64> {
    if a.len() != b.len() {
        return Err(domain(format!(
            "selection sizes differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let common = a
        .indices
        .iter()
        .filter(|i| b.indices.binary_search(i).is_ok())
        .count();
    Ok(common as f64 / a.len() as f64)
}

/// Splits the sequences into a first and second half.
pub fn split_halves(dump: &ActivationDump) -> Result<(ActivationDump, ActivationDump)> {
    let k = dump.records.len();
    if k < 2 {
        return Err(domain("split needs at least 2 sequences"));
    }
    let half = k / 2;
    let part = |recs: &[crate::dumps::SequenceRecord]| {
        let mut manifest = dump.manifest.clone();
        manifest.num_sequences = recs.len();
        ActivationDump::new(manifest, recs.to_vec(), dump.unembedding.clone())
    };
    Ok((part(&dump.records[..half])?, part(&dump.records[half..])?))
}

/// Overlap of the top-`dprime` selections computed on each half of the dump.
pub fn split_overlap(dump: &ActivationDump, strategy: Strategy, dprime: usize) -> Result<f64> {
    let (a, b) = split_halves(dump)?;
    let sa = select_topk(&importance(&a, strategy)?, dprime)?;
    let sb = select_topk(&importance(&b, strategy)?, dprime)?;
    overlap_ratio(&sa, &sb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dumps::{DumpManifest, SequenceRecord};
    use crate::flowsim::balancedness_drift;
    use crate::linalg::singular_values;

    fn report(scores: Vec<f64>) -> ImportanceReport {
        ImportanceReport {
            scores,
            strategy: Strategy::MeanAbs,
            num_layers_used: 1,
            num_sequences_used: 1,
        }
    }

    #[test]
    fn topk_tie_break() {
        let sel = select_topk(&report(vec![0.1, 0.9, 0.5, 0.5]), 2).unwrap();
        assert_eq!(sel.indices(), &[1, 2]);
        let sel = select_topk(&report(vec![1.0; 5]), 3).unwrap();
        assert_eq!(sel.indices(), &[0, 1, 2]);
        assert!(select_topk(&report(vec![1.0; 4]), 4).is_err());
    }

    #[test]
    fn selection_pair_properties() {
        let sel = ChannelSelection::new(vec![2, 0], 4).unwrap();
        let p = build_selection_pair(&sel, 4).unwrap();
        assert_eq!(p.q().column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.q().column(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0, 0.0]);
        let m = p.product();
        assert_eq!(
            m.diagonal().iter().copied().collect::<Vec<_>>(),
            vec![1.0, 0.0, 1.0, 0.0]
        );
        assert_eq!(balancedness_drift(&p), 0.0);
        let s = singular_values(&m);
        assert_eq!(s.iter().filter(|&&v| (v - 1.0).abs() < 1e-12).count(), 2);
        assert!(s[2..].iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn orthogonal_columns_score_norms() {
        let a = DMatrix::from_row_slice(3, 3, &[3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
        let qr = pivoted_qr(&a).unwrap();
        assert_eq!(qr.order, vec![0, 2, 1]);
        for (got, want) in qr.scores.iter().zip([3.0, 1.0, 2.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_column_scores_zero() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 1.0, 0.5, -1.0, 0.5, 3.0, 0.0, 3.0]);
        let qr = pivoted_qr(&a).unwrap();
        assert!(qr.scores[2] < 1e-9 || qr.scores[0] < 1e-9);
        assert!(pivoted_qr(&DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn constant_channel_scores_its_magnitude() {
        let m = F32Matrix::new(3, 2, vec![-2.5, 1.0, -2.5, 0.0, -2.5, -1.0]).unwrap();
        let dump = ActivationDump::new(
            DumpManifest::new(2, 0, 1),
            vec![SequenceRecord {
                layers: vec![m],
                postnorm: None,
            }],
            None,
        )
        .unwrap();
        let r = importance_mean_abs(&dump).unwrap();
        assert!((r.scores[0] - 2.5).abs() < 1e-12);
        assert!(matches!(importance_postnorm(&dump), Err(Error::Capability(_))));
    }

    #[test]
    fn overlap_bounds() {
        let a = ChannelSelection::new(vec![0, 1], 4).unwrap();
        let b = ChannelSelection::new(vec![2, 3], 4).unwrap();
        assert_eq!(overlap_ratio(&a, &a).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&a, &b).unwrap(), 0.0);
        let c = ChannelSelection::new(vec![0], 4).unwrap();
        assert!(overlap_ratio(&a, &c).is_err());
    }

    #[test]
    fn init_pairs() {
        let p = build_pair(&InitSpec::orthogonal(3), 8, 3).unwrap();
        assert!(balancedness_drift(&p) < 1e-12);
        let a = build_pair(&InitSpec::gaussian(0.02, 5), 8, 3).unwrap();
        let b = build_pair(&InitSpec::gaussian(0.02, 5), 8, 3).unwrap();
        assert_eq!(a, b);
        assert!(build_pair(&InitSpec::gaussian(0.0, 5), 8, 3).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("nope".parse::<Strategy>().is_err());
    }
}
