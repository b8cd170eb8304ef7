//! Numerical checks shared by the `flow` and `check` commands.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dumps::{ActivationDump, DumpManifest, F32Matrix, SequenceRecord};
use crate::error::Result;
use crate::flowsim::{
    flow_gradients, predicted_sigma_dot, recon_loss, simulate_from_moment,
    spectral_coupling_residual, Flow, FlowConfig, Integrator, ProjectionPair,
};
use crate::initlab::{
    build_selection_pair, importance_mean_abs, importance_qr, overlap_ratio, select_topk,
    split_overlap, ChannelSelection, Strategy,
};
use crate::linalg::{
    gaussian_matrix, random_orthonormal, rng_from_seed, second_moment, singular_values, SeededRng,
};
use crate::spectral::{
    binary_collapse_check, closest_pair_codirectional, distinct_rows, erank, logits,
    max_abs_cosine, min_tv, preprocess, prob_bound, rep_bound, LogitHead, PreppedMatrix,
    RepMatrix,
};
use crate::synth::{
    profiles, random_unembedding, synth_dump, synth_in_basis, synth_matrix, LayerProfile,
    SynthDumpConfig,
};
use crate::widthnet::{
    merge, merged_forward, relative_error, teacher_forward, wrapped_forward, TeacherLayer,
    WrappedLayer,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub metric: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn at_most(name: &str, metric: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: metric <= threshold,
            metric,
            threshold,
            detail,
        }
    }

    fn at_least(name: &str, metric: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: metric >= threshold,
            metric,
            threshold,
            detail,
        }
    }
}

/// Balanced pair `Q = G`, `O = Gᵀ` with Gaussian `G` of the given scale.
pub fn balanced_pair(d: usize, dprime: usize, scale: f64, rng: &mut SeededRng) -> Result<ProjectionPair> {
    let q = gaussian_matrix(d, dprime, scale, rng);
    let o = q.transpose();
    ProjectionPair::new(q, o)
}

/// Preprocessed `L × D` sample with geometric spectrum of the given
/// condition number in a Haar frame.
pub fn anisotropic_sample(l: usize, d: usize, condition: f64, rng: &mut SeededRng) -> Result<DMatrix<f64>> {
    let basis = random_orthonormal(d, d, rng);
    let raw = synth_in_basis(l, &basis, &profiles::geometric(d, 1.0, 1.0 / condition), rng)?;
    Ok(preprocess(&RepMatrix::new(raw)?)?.data().clone())
}

/// Final drift at `η/2` over drift at `η` for the same horizon.
pub fn balancedness_ratio(moment: &DMatrix<f64>, init: &ProjectionPair, eta: f64, horizon: f64) -> Result<f64> {
    let mut drifts = [0.0; 2];
    for (slot, h) in [eta, eta / 2.0].into_iter().enumerate() {
        let steps = (horizon / h).round() as usize;
        let cfg = FlowConfig {
            record_every: steps,
            ..FlowConfig::euler(h, steps)
        };
        drifts[slot] = simulate_from_moment(moment, init, &cfg)?.last().balancedness_drift;
    }
    Ok(drifts[1] / drifts[0])
}

pub fn check_balancedness(moment: &DMatrix<f64>, dprime: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = rng_from_seed(seed);
    let init = balanced_pair(moment.nrows(), dprime, 0.3, &mut rng)?;
    let ratio = balancedness_ratio(moment, &init, 0.02, 2.0)?;
    Ok(CheckOutcome::at_most(
        "balancedness",
        ratio,
        0.6,
        "Euler drift at eta/2 over drift at eta, horizon 2".into(),
    ))
}

/// Largest coupling residual over an RK4 run from a balanced init.
pub fn max_coupling_residual(moment: &DMatrix<f64>, init: ProjectionPair, eta: f64, steps: usize, every: usize) -> Result<f64> {
    let mut flow = Flow::new(moment.clone(), init, eta, Integrator::Rk4)?;
    let mut worst: f64 = 0.0;
    for step in 0..=steps {
        if step % every == 0 || step == steps {
            worst = worst.max(spectral_coupling_residual(flow.pair()));
        }
        if step < steps {
            flow.step();
        }
    }
    Ok(worst)
}

pub fn check_coupling(moment: &DMatrix<f64>, dprime: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = rng_from_seed(seed);
    let init = balanced_pair(moment.nrows(), dprime, 0.3, &mut rng)?;
    let worst = max_coupling_residual(moment, init, 1e-4, 5000, 250)?;
    Ok(CheckOutcome::at_most(
        "spectral_coupling",
        worst,
        1e-6,
        "max residual over an RK4 run, eta 1e-4".into(),
    ))
}

/// Compares predicted `dσ/dt` with one-step Euler differences at `η = 1e-4`
/// every `every` steps; returns `(agreeing, checked)` over reliable indices.
pub fn sigma_dot_agreement(moment: &DMatrix<f64>, init: ProjectionPair, steps: usize, every: usize) -> Result<(usize, usize)> {
    let eta = 1e-4;
    let dprime = init.reduced_dim();
    let mut flow = Flow::new(moment.clone(), init, eta, Integrator::Euler)?;
    let (mut good, mut total) = (0, 0);
    for step in 0..steps {
        if step % every == 0 {
            let pred = predicted_sigma_dot(moment, &flow.pair().product(), dprime)?;
            let mut next = flow.clone();
            next.step();
            let after = singular_values(&next.pair().product());
            for r in (0..dprime).filter(|&r| pred.reliable[r]) {
                total += 1;
                let fd = (after[r] - pred.sigma[r]) / eta;
                if (fd - pred.values[r]).abs() < 1e-3 * pred.values[r].abs() {
                    good += 1;
                }
            }
        }
        flow.step();
    }
    Ok((good, total))
}

pub fn check_sigma_dynamics(moment: &DMatrix<f64>, dprime: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = rng_from_seed(seed);
    let init = balanced_pair(moment.nrows(), dprime, 0.3, &mut rng)?;
    let (good, total) = sigma_dot_agreement(moment, init, 4000, 500)?;
    let frac = if total == 0 { 0.0 } else { good as f64 / total as f64 };
    Ok(CheckOutcome::at_least(
        "sigma_dynamics",
        frac,
        0.95,
        format!("{good}/{total} reliable points within 1e-3 relative"),
    ))
}

/// `max_r |σ_r(after one Euler step) − σ_r(0)|`.
pub fn one_step_sigma_change(moment: &DMatrix<f64>, init: &ProjectionPair, eta: f64) -> Result<f64> {
    let before = singular_values(&init.product());
    let mut flow = Flow::new(moment.clone(), init.clone(), eta, Integrator::Euler)?;
    flow.step();
    let after = singular_values(&flow.pair().product());
    Ok(before
        .iter()
        .zip(&after)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

pub fn check_vanishing(moment: &DMatrix<f64>, sel: &ChannelSelection) -> Result<CheckOutcome> {
    let init = build_selection_pair(sel, moment.nrows())?;
    let full = one_step_sigma_change(moment, &init, 0.1)?;
    let half = one_step_sigma_change(moment, &init, 0.05)?;
    Ok(CheckOutcome::at_most(
        "vanishing_dynamics",
        half / full,
        0.3,
        format!("one-step change {full:e} at eta 0.1, {half:e} at eta 0.05"),
    ))
}

/// Wraps a single matrix as a one-layer, one-sequence dump.
pub fn single_matrix_dump(x: &DMatrix<f64>) -> Result<ActivationDump> {
    ActivationDump::new(
        DumpManifest::new(x.ncols(), 0, 1),
        vec![SequenceRecord {
            layers: vec![F32Matrix::from_dmatrix(x)],
            postnorm: None,
        }],
        None,
    )
}

/// Mean-abs channel selection computed from `x` alone.
pub fn select_from_matrix(x: &DMatrix<f64>, dprime: usize) -> Result<ChannelSelection> {
    select_topk(&importance_mean_abs(&single_matrix_dump(x)?)?, dprime)
}

/// `‖fd − ∇‖_∞ / ‖∇‖_∞` for central differences of `recon_loss`.
pub fn gradient_fd_error(x: &DMatrix<f64>, p: &ProjectionPair, h: f64) -> Result<f64> {
    let g = flow_gradients(x, p)?;
    let (q0, o0) = (p.q().clone(), p.o().clone());
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in 0..q0.len() {
        let mut qp = q0.clone();
        let mut qm = q0.clone();
        qp[i] += h;
        qm[i] -= h;
        let fd = (recon_loss(x, &ProjectionPair::new(qp, o0.clone())?)?
            - recon_loss(x, &ProjectionPair::new(qm, o0.clone())?)?)
            / (2.0 * h);
        worst = worst.max((fd - g.grad_q[i]).abs());
        scale = scale.max(g.grad_q[i].abs());
    }
    for i in 0..o0.len() {
        let mut op = o0.clone();
        let mut om = o0.clone();
        op[i] += h;
        om[i] -= h;
        let fd = (recon_loss(x, &ProjectionPair::new(q0.clone(), op)?)?
            - recon_loss(x, &ProjectionPair::new(q0.clone(), om)?)?)
            / (2.0 * h);
        worst = worst.max((fd - g.grad_o[i]).abs());
        scale = scale.max(g.grad_o[i].abs());
    }
    Ok(if scale > 0.0 { worst / scale } else { worst })
}

pub fn check_gradients(count: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let l = rng.random_range(2..=32);
        let d = rng.random_range(2..=12);
        let dp = rng.random_range(1..d);
        let x = gaussian_matrix(l, d, 1.0, &mut rng);
        let p = ProjectionPair::new(
            gaussian_matrix(d, dp, 0.5, &mut rng),
            gaussian_matrix(dp, d, 0.5, &mut rng),
        )?;
        worst = worst.max(gradient_fd_error(&x, &p, 1e-5)?);
    }
    Ok(CheckOutcome::at_most(
        "gradients",
        worst,
        1e-6,
        format!("{count} random instances, central differences"),
    ))
}

fn random_spectrum(d: usize, rng: &mut SeededRng) -> Vec<f64> {
    let k = rng.random_range(1..=d);
    (0..k).map(|_| rng.random::<f64>().powi(3) + 1e-3).collect()
}

fn unit_vector(d: usize, rng: &mut SeededRng) -> DVector<f64> {
    let v = gaussian_matrix(d, 1, 1.0, rng);
    DVector::from_column_slice((&v / v.norm()).as_slice())
}

/// Cone-constrained sample whose most similar pair is co-directional after
/// preprocessing; instances failing that are redrawn. Returns the matrix
/// and the number of redraws.
pub fn cone_sample(l: usize, d: usize, rng: &mut SeededRng) -> Result<(PreppedMatrix, usize)> {
    let mut redraws = 0;
    loop {
        let center = unit_vector(d, rng);
        let spectrum = random_spectrum(d, rng);
        let x = synth_matrix(l, d, &spectrum, Some(&center), rng.random())?;
        let prepped = preprocess(&x)?;
        if closest_pair_codirectional(&prepped) {
            return Ok((prepped, redraws));
        }
        redraws += 1;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundTally {
    pub checked: usize,
    pub jensen_violations: usize,
    pub rep_violations: usize,
    pub tv_checked: usize,
    pub tv_violations: usize,
    pub cone_redraws: usize,
    pub collapse_checked: usize,
    pub collapse_violations: usize,
}

pub fn bound_tally(count: usize, tv_count: usize, seed: u64) -> Result<BoundTally> {
    let mut rng = rng_from_seed(seed);
    let mut t = BoundTally::default();
    for _ in 0..count {
        let l = rng.random_range(4..=64);
        let d = rng.random_range(2..=32);
        let basis = random_orthonormal(d, d, &mut rng);
        let raw = synth_in_basis(l, &basis, &random_spectrum(d, &mut rng), &mut rng)?;
        let x = preprocess(&RepMatrix::new(raw)?)?;
        let s = erank(x.data())?;
        t.checked += 1;
        if s.collision_probability < 1.0 / s.erank - 1e-12 {
            t.jensen_violations += 1;
        }
        if max_abs_cosine(&x).value < rep_bound(l, s.erank)? - 1e-9 {
            t.rep_violations += 1;
        }
    }
    for _ in 0..tv_count {
        let l = rng.random_range(4..=64);
        let d = rng.random_range(2..=32);
        let voc = rng.random_range(2..=64);
        let (x, redraws) = cone_sample(l, d, &mut rng)?;
        t.cone_redraws += redraws;
        let head = random_unembedding(d, voc, &mut rng).logit_head()?;
        let s = erank(x.data())?;
        let tv = min_tv(&logits(x.data(), &head)?)?.value;
        let bound = prob_bound(l, s.erank, voc, head.scaled_spectral_norm())?;
        t.tv_checked += 1;
        if tv > bound + 1e-9 {
            t.tv_violations += 1;
        }
    }
    for _ in 0..tv_count {
        let l = rng.random_range(4..=64);
        let d = rng.random_range(2..=32);
        let voc = rng.random_range(2..=64);
        let (x, head) = rank_one_case(l, d, voc, &mut rng)?;
        let report = binary_collapse_check(&x, 1e-6)?;
        t.collapse_checked += 1;
        if !report.is_rank1 || distinct_rows(&logits(x.data(), &head)?, 1e-6) > 2 {
            t.collapse_violations += 1;
        }
    }
    Ok(t)
}

/// Rows `±c_l v` with a random unembedding block.
pub fn rank_one_case(l: usize, d: usize, voc: usize, rng: &mut SeededRng) -> Result<(PreppedMatrix, LogitHead)> {
    let mut spectrum = vec![0.0; d];
    spectrum[0] = 1.0;
    let x = preprocess(&synth_matrix(l, d, &spectrum, None, rng.random())?)?;
    let head = random_unembedding(d, voc, rng).logit_head()?;
    Ok((x, head))
}

pub fn check_bounds(count: usize, tv_count: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let t = bound_tally(count, tv_count, seed)?;
    let detail = |n: usize| format!("{n} instances");
    Ok(vec![
        CheckOutcome::at_most("jensen", t.jensen_violations as f64, 0.0, detail(t.checked)),
        CheckOutcome::at_most("rep_bound", t.rep_violations as f64, 0.0, detail(t.checked)),
        CheckOutcome::at_most(
            "prob_bound",
            t.tv_violations as f64,
            0.0,
            format!("{} cone instances, {} redraws", t.tv_checked, t.cone_redraws),
        ),
        CheckOutcome::at_most(
            "binary_collapse",
            t.collapse_violations as f64,
            0.0,
            detail(t.collapse_checked),
        ),
    ])
}

/// Worst wrapped-vs-merged relative error over random layers.
pub fn merge_error(count: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let heads = rng.random_range(1..=3);
        let hd = rng.random_range(1..=4);
        let d = rng.random_range(4..=16);
        let dp = rng.random_range(1..d);
        let ff = rng.random_range(2..=24);
        let l = rng.random_range(1..=8);
        let layer = WrappedLayer::random(TeacherLayer::random(d, heads, hd, ff, &mut rng), dp, &mut rng);
        let x = gaussian_matrix(l, dp, 1.0, &mut rng);
        let a = wrapped_forward(&x, std::slice::from_ref(&layer))?;
        let b = merged_forward(&x, &[merge(&layer)])?;
        worst = worst.max(relative_error(&a[0].output, &b[0].output));
    }
    Ok(worst)
}

pub fn check_merge(count: usize, seed: u64) -> Result<CheckOutcome> {
    let worst = merge_error(count, seed)?;
    let mut rng = rng_from_seed(seed ^ 0x9e37);
    let t = TeacherLayer::random(8, 2, 2, 12, &mut rng);
    let eye = DMatrix::identity(8, 8);
    let ident = WrappedLayer {
        g_attn: t.g_attn.clone(),
        g_ffn: t.g_ffn.clone(),
        o_attn: eye.clone(),
        o_ffn: eye.clone(),
        q_attn: eye.clone(),
        q_ffn: eye,
        teacher: t.clone(),
    };
    let x = gaussian_matrix(5, 8, 1.0, &mut rng);
    let exact = teacher_forward(&x, &[t])? == wrapped_forward(&x, &[ident])?;
    let mut out = CheckOutcome::at_most(
        "merge_equivalence",
        worst,
        1e-5,
        format!("{count} random layers; identity wrapping exact: {exact}"),
    );
    out.passed &= exact;
    Ok(out)
}

pub fn check_importance(seed: u64) -> Result<Vec<CheckOutcome>> {
    let cfg = SynthDumpConfig {
        hidden_dim: 64,
        num_layers: 4,
        num_sequences: 8,
        seq_len: 64,
        profile: LayerProfile::Fixed(profiles::exponential(64, 0.1)),
        mix: 0.3,
        seed,
        ..Default::default()
    };
    let dump = synth_dump(&cfg)?;
    let a = select_topk(&importance_mean_abs(&dump)?, 16)?;
    let b = select_topk(&importance_qr(&dump)?, 16)?;
    Ok(vec![
        CheckOutcome::at_least(
            "importance_agreement",
            overlap_ratio(&a, &b)?,
            0.6,
            "mean_abs vs qr_pivot top-16 overlap".into(),
        ),
        CheckOutcome::at_least(
            "split_half_overlap",
            split_overlap(&dump, Strategy::MeanAbs, 16)?,
            0.7,
            "mean_abs top-16 overlap across dump halves".into(),
        ),
    ])
}

/// Flow checks on one second moment: balancedness, coupling, singular-value
/// dynamics, and vanishing dynamics from `sel`.
pub fn flow_checks(moment: &DMatrix<f64>, sel: &ChannelSelection, seed: u64) -> Result<Vec<CheckOutcome>> {
    let dprime = sel.len();
    Ok(vec![
        check_balancedness(moment, dprime, seed)?,
        check_coupling(moment, dprime, seed)?,
        check_sigma_dynamics(moment, dprime, seed)?,
        check_vanishing(moment, sel)?,
    ])
}

/// The full suite at desk scale.
pub fn run_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = rng_from_seed(seed);
    let x = anisotropic_sample(128, 16, 200.0, &mut rng)?;
    let sel = select_from_matrix(&x, 4)?;
    let mut out = vec![check_gradients(20, seed)?];
    out.extend(flow_checks(&second_moment(&x), &sel, seed)?);
    out.extend(check_bounds(200, 50, seed)?);
    out.push(check_merge(50, seed)?);
    out.extend(check_importance(seed)?);
    Ok(out)
}
