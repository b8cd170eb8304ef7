//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use erank_core::analysis::analyze_dump;
use erank_core::checks::{
    anisotropic_sample, balanced_pair, balancedness_ratio, bound_tally, check_importance,
    check_merge, check_vanishing, gradient_fd_error, max_coupling_residual, select_from_matrix,
    sigma_dot_agreement,
};
use erank_core::flowsim::{growth_correlation, simulate_from_moment, FlowConfig, ProjectionPair};
use erank_core::initlab::{build_pair, InitSpec};
use erank_core::linalg::{gaussian_matrix, rng_from_seed, second_moment};
use erank_core::proxytrain::{train_autoencoder, TrainConfig};
use erank_core::spectral::erank;
use erank_core::synth::{proxy_sample, synth_dump, LayerProfile, SynthDumpConfig};
use rand::Rng;

type Outcome = Result<(bool, String), erank_core::Error>;
type Criterion = (&'static str, fn() -> Outcome);

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from_seed(100);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let l = rng.random_range(2..=64);
        let d = rng.random_range(2..=32);
        let dp = rng.random_range(1..d);
        let x = gaussian_matrix(l, d, 1.0, &mut rng);
        let p = ProjectionPair::new(gaussian_matrix(d, dp, 0.5, &mut rng), gaussian_matrix(dp, d, 0.5, &mut rng))?;
        worst = worst.max(gradient_fd_error(&x, &p, 1e-5)?);
    }
    let t = start.elapsed();
    Ok((worst < 1e-6 && within(t, 10), format!("max rel err {worst:.2e} over 50 instances, {t:.1?}")))
}

fn sample(seed: u64) -> Result<nalgebra::DMatrix<f64>, erank_core::Error> {
    anisotropic_sample(128, 16, 200.0, &mut rng_from_seed(seed))
}

fn balancedness() -> Outcome {
    let start = Instant::now();
    let mut ratios = Vec::new();
    for seed in 0..10 {
        let moment = second_moment(&sample(seed)?);
        let init = balanced_pair(16, 4, 0.3, &mut rng_from_seed(seed + 50))?;
        ratios.push(balancedness_ratio(&moment, &init, 0.02, 2.0)?);
    }
    let worst = ratios.iter().cloned().fold(0.0, f64::max);
    let t = start.elapsed();
    Ok((worst <= 0.6 && within(t, 30), format!("worst drift ratio {worst:.3} over 10 seeds, {t:.1?}")))
}

fn sigma_dynamics() -> Outcome {
    let start = Instant::now();
    let (mut good, mut total) = (0, 0);
    for seed in 0..3 {
        let moment = second_moment(&sample(seed)?);
        let init = balanced_pair(16, 4, 0.3, &mut rng_from_seed(seed + 50))?;
        let (g, n) = sigma_dot_agreement(&moment, init, 4000, 100)?;
        good += g;
        total += n;
    }
    let frac = good as f64 / total.max(1) as f64;
    let t = start.elapsed();
    Ok((
        total > 0 && frac >= 0.95 && within(t, 60),
        format!("{good}/{total} points within 1e-3 ({:.1}%), {t:.1?}", 100.0 * frac),
    ))
}

fn coupling() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let moment = second_moment(&sample(seed)?);
        let init = balanced_pair(16, 4, 0.3, &mut rng_from_seed(seed + 50))?;
        worst = worst.max(max_coupling_residual(&moment, init, 1e-4, 5000, 100)?);
    }
    Ok((worst < 1e-6, format!("max residual {worst:.2e} over 3 RK4 runs")))
}

fn vanishing() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let x = sample(seed)?;
        let out = check_vanishing(&second_moment(&x), &select_from_matrix(&x, 4)?)?;
        worst = worst.max(out.metric);
    }
    Ok((worst <= 0.3, format!("worst one-step ratio {worst:.3} over 10 seeds")))
}

fn winner_take_all() -> Outcome {
    let mut early_ok = 0;
    let mut late_below = 0;
    let mut summary = Vec::new();
    for seed in 0..10 {
        let x = anisotropic_sample(256, 32, 200.0, &mut rng_from_seed(seed))?;
        let moment = second_moment(&x);
        let init = build_pair(&InitSpec::gaussian(0.02, seed), 32, 8)?;
        let cfg = FlowConfig { record_every: 25, ..FlowConfig::euler(0.05, 8000) };
        let trace = simulate_from_moment(&moment, &init, &cfg)?;
        let early = growth_correlation(&trace, 0, 200)?;
        let late = growth_correlation(&trace, 2000, 2200)?;
        early_ok += usize::from(early > 0.5);
        late_below += usize::from(late < early);
        summary.push(format!("{early:.2}/{late:.2}"));
    }
    Ok((
        early_ok >= 8 && late_below >= 8,
        format!("early > 0.5 in {early_ok}/10, late < early in {late_below}/10 [{}]", summary.join(" ")),
    ))
}

fn proxy() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig::default();
    let mut wins = 0;
    let mut ranks = Vec::new();
    for seed in 0..10 {
        let x = proxy_sample(512, 128, seed)?;
        let sel = select_from_matrix(&x, 64)?;
        let s = train_autoencoder(&x, &InitSpec::selection(&sel), 64, &cfg)?;
        let g = train_autoencoder(&x, &InitSpec::gaussian(0.02, seed), 64, &cfg)?;
        let o = train_autoencoder(&x, &InitSpec::orthogonal(seed), 64, &cfg)?;
        let ok = s.final_loss < g.final_loss
            && s.hidden_erank >= 1.5 * g.hidden_erank
            && g.hidden_erank < o.hidden_erank
            && o.hidden_erank < s.hidden_erank;
        wins += usize::from(ok);
        ranks.push(format!("{:.0}/{:.0}/{:.0}", s.hidden_erank, o.hidden_erank, g.hidden_erank));
        if seed == 0 {
            ranks.insert(0, format!("data eRank {:.1};", erank(&x)?.erank));
        }
    }
    let t = start.elapsed();
    Ok((
        wins >= 9 && within(t, 300),
        format!("ordering holds in {wins}/10 seeds, hidden eRank sel/orth/gauss {}, {t:.1?}", ranks.join(" ")),
    ))
}

fn bounds() -> Outcome {
    let start = Instant::now();
    let t = bound_tally(500, 200, 7)?;
    let el = start.elapsed();
    let ok = t.checked == 500
        && t.tv_checked == 200
        && t.jensen_violations + t.rep_violations + t.tv_violations + t.collapse_violations == 0
        && within(el, 60);
    Ok((
        ok,
        format!(
            "violations jensen {} rep {} tv {} rank-1 {} ({} cone redraws), {el:.1?}",
            t.jensen_violations, t.rep_violations, t.tv_violations, t.collapse_violations, t.cone_redraws
        ),
    ))
}

fn merge_equivalence() -> Outcome {
    let out = check_merge(100, 3)?;
    Ok((out.passed, format!("max rel err {:.2e}; {}", out.metric, out.detail)))
}

fn importance_agreement() -> Outcome {
    let mut worst_agree: f64 = 1.0;
    let mut worst_split: f64 = 1.0;
    for seed in 0..5 {
        let out = check_importance(seed)?;
        worst_agree = worst_agree.min(out[0].metric);
        worst_split = worst_split.min(out[1].metric);
    }
    Ok((
        worst_agree >= 0.6 && worst_split >= 0.7,
        format!("worst mean_abs/qr overlap {worst_agree:.3}, worst split-half {worst_split:.3} over 5 dumps"),
    ))
}

fn collapse_correlation() -> Outcome {
    let cfg = SynthDumpConfig {
        hidden_dim: 32,
        num_layers: 8,
        num_sequences: 4,
        seq_len: 64,
        profile: LayerProfile::Collapse,
        vocab_size: 64,
        seed: 11,
        ..Default::default()
    };
    let analysis = analyze_dump(&synth_dump(&cfg)?, true)?;
    let corr = analysis.erank_tv_correlation.unwrap_or(f64::NAN);
    Ok((corr > 0.0, format!("corr(erank, min_tv) = {corr:.3} over {} layers", analysis.layers.len())))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("gradient correctness", gradients),
        ("balancedness conservation", balancedness),
        ("singular-value dynamics", sigma_dynamics),
        ("spectral coupling", coupling),
        ("vanishing initial dynamics", vanishing),
        ("winner-take-all", winner_take_all),
        ("proxy ordering", proxy),
        ("bound suites", bounds),
        ("merge equivalence", merge_equivalence),
        ("importance agreement", importance_agreement),
        ("collapse correlation", collapse_correlation),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let (ok, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!ok);
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {}/{} criteria passed", 11 - failed, 11);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
