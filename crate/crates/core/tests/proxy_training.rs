use erank_core::flowsim::{recon_loss, ProjectionPair};
use erank_core::initlab::{build_pair, InitSpec};
use erank_core::linalg::{gaussian_matrix, random_orthonormal, rng_from_seed};
use erank_core::proxytrain::{orthogonal_penalty, train_autoencoder, train_pair, AdamState, TrainConfig};
use erank_core::spectral::erank;
use erank_core::checks::{anisotropic_sample, select_from_matrix};
use erank_core::synth::proxy_sample;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn penalty_value(q: &DMatrix<f64>, o: &DMatrix<f64>, w: f64) -> f64 {
    let k = q.ncols();
    let eye = DMatrix::<f64>::identity(k, k);
    w * ((q.transpose() * q - &eye).norm_squared() + (o * o.transpose() - &eye).norm_squared())
}

fn fd_grad(f: impl Fn(&DMatrix<f64>) -> f64, at: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(at.nrows(), at.ncols());
    for i in 0..at.len() {
        let mut plus = at.clone();
        let mut minus = at.clone();
        plus[i] += h;
        minus[i] -= h;
        g[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn penalty_gradients_match_differences(d in 2usize..9, w in 0.1f64..3.0, seed in any::<u64>()) {
        let k = 1 + (seed as usize) % (d - 1);
        let mut rng = rng_from_seed(seed);
        let q = gaussian_matrix(d, k, 0.7, &mut rng);
        let o = gaussian_matrix(k, d, 0.7, &mut rng);
        let pen = orthogonal_penalty(&ProjectionPair::new(q.clone(), o.clone()).unwrap(), w);
        prop_assert!((pen.value - penalty_value(&q, &o, w)).abs() <= 1e-12 * pen.value.max(1.0));
        let gq = fd_grad(|m| penalty_value(m, &o, w), &q, 1e-5);
        let go = fd_grad(|m| penalty_value(&q, m, w), &o, 1e-5);
        prop_assert!(rel(&pen.grad_q, &gq) < 1e-6);
        prop_assert!(rel(&pen.grad_o, &go) < 1e-6);
    }
}

#[test]
fn adam_first_step_moves_each_entry_by_lr() {
    let mut rng = rng_from_seed(4);
    let p = ProjectionPair::new(gaussian_matrix(5, 2, 1.0, &mut rng), gaussian_matrix(2, 5, 1.0, &mut rng)).unwrap();
    let cfg = TrainConfig { learning_rate: 0.01, ..Default::default() };
    let (mut q, mut o) = p.clone().into_parts();
    let gq = gaussian_matrix(5, 2, 1.0, &mut rng);
    let go = gaussian_matrix(2, 5, 1.0, &mut rng);
    let mut adam = AdamState::new(&p);
    adam.update(&cfg, &mut q, &mut o, &gq, &go);
    assert_eq!(adam.step_count(), 1);
    for i in 0..q.len() {
        let expect = p.q()[i] - 0.01 * gq[i] / (gq[i].abs() + 1e-8);
        assert!((q[i] - expect).abs() < 1e-12);
    }
    for i in 0..o.len() {
        let expect = p.o()[i] - 0.01 * go[i] / (go[i].abs() + 1e-8);
        assert!((o[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn low_rank_data_is_fit_exactly_by_its_subspace() {
    let mut rng = rng_from_seed(8);
    let basis = random_orthonormal(10, 3, &mut rng);
    let x = gaussian_matrix(40, 3, 1.0, &mut rng) * basis.transpose();
    let pair = ProjectionPair::new(basis.clone(), basis.transpose()).unwrap();
    let rep = train_pair(&x, pair, "subspace", &TrainConfig { epochs: 5, ..Default::default() }).unwrap();
    assert!(rep.final_loss < 1e-6);
    assert!(rep.loss_curve.iter().all(|l| *l < 1e-6));
}

#[test]
fn training_is_deterministic() {
    let x = anisotropic_sample(64, 12, 100.0, &mut rng_from_seed(1)).unwrap();
    let cfg = TrainConfig { epochs: 20, learning_rate: 1e-3, ..Default::default() };
    let a = train_autoencoder(&x, &InitSpec::gaussian(0.02, 7), 4, &cfg).unwrap();
    let b = train_autoencoder(&x, &InitSpec::gaussian(0.02, 7), 4, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.loss_curve.len(), 21);
    assert!((a.loss_curve[0] - recon_loss(&x, &build_pair(&InitSpec::gaussian(0.02, 7), 12, 4).unwrap()).unwrap()).abs() < 1e-12);
}

#[test]
fn selection_starts_no_worse_than_small_gaussian() {
    for seed in 0..5 {
        let x = anisotropic_sample(128, 16, 200.0, &mut rng_from_seed(seed)).unwrap();
        let sel = select_from_matrix(&x, 4).unwrap();
        let cfg = TrainConfig { epochs: 1, learning_rate: 1e-3, ..Default::default() };
        let s = train_autoencoder(&x, &InitSpec::selection(&sel), 4, &cfg).unwrap();
        let g = train_autoencoder(&x, &InitSpec::gaussian(0.02, seed), 4, &cfg).unwrap();
        assert!(s.loss_curve[0] <= g.loss_curve[0], "seed {seed}");
        assert!(g.loss_curve[1] < g.loss_curve[0], "seed {seed}");
    }
}

#[test]
fn penalty_raises_loss_only_when_weighted() {
    let x = anisotropic_sample(64, 8, 50.0, &mut rng_from_seed(2)).unwrap();
    let base = TrainConfig { epochs: 3, ..Default::default() };
    let plain = train_autoencoder(&x, &InitSpec::gaussian(0.5, 1), 3, &base).unwrap();
    let pen = train_autoencoder(
        &x,
        &InitSpec::gaussian(0.5, 1),
        3,
        &TrainConfig { orthogonal_penalty_weight: 1.0, ..base.clone() },
    )
    .unwrap();
    assert!(pen.loss_curve[0] > plain.loss_curve[0]);
    let orth = train_autoencoder(
        &x,
        &InitSpec::orthogonal(1),
        3,
        &TrainConfig { orthogonal_penalty_weight: 1.0, ..base.clone() },
    )
    .unwrap();
    let orth_plain = train_autoencoder(&x, &InitSpec::orthogonal(1), 3, &base).unwrap();
    assert!((orth.loss_curve[0] - orth_plain.loss_curve[0]).abs() < 1e-12);
}

#[test]
fn invalid_configs_are_rejected() {
    let x = anisotropic_sample(32, 6, 10.0, &mut rng_from_seed(0)).unwrap();
    for cfg in [
        TrainConfig { learning_rate: 0.0, ..Default::default() },
        TrainConfig { beta1: 1.0, ..Default::default() },
        TrainConfig { eps: 0.0, ..Default::default() },
        TrainConfig { orthogonal_penalty_weight: -1.0, ..Default::default() },
    ] {
        assert!(train_autoencoder(&x, &InitSpec::orthogonal(0), 2, &cfg).is_err());
    }
}

#[test]
fn proxy_sample_has_target_effective_rank() {
    for seed in 0..3 {
        let x = proxy_sample(512, 128, seed).unwrap();
        let e = erank(&x).unwrap().erank;
        assert!((30.0..=50.0).contains(&e), "seed {seed}: {e}");
    }
}

#[test]
fn selection_keeps_more_hidden_rank_at_convergence() {
    for seed in 0..3 {
        let x = anisotropic_sample(256, 24, 150.0, &mut rng_from_seed(seed)).unwrap();
        let sel = select_from_matrix(&x, 8).unwrap();
        let cfg = TrainConfig { epochs: 100, learning_rate: 1e-4, ..Default::default() };
        let s = train_autoencoder(&x, &InitSpec::selection(&sel), 8, &cfg).unwrap();
        let g = train_autoencoder(&x, &InitSpec::gaussian(0.02, seed), 8, &cfg).unwrap();
        assert!(s.hidden_erank >= g.hidden_erank, "seed {seed}: {} vs {}", s.hidden_erank, g.hidden_erank);
        assert!(s.final_loss < g.final_loss);
    }
}
