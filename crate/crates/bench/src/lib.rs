//! Shared fixtures for the kernel benchmarks.

use erank_core::checks::{anisotropic_sample, select_from_matrix};
use erank_core::initlab::{build_pair, InitSpec};
use erank_core::linalg::{gaussian_matrix, rng_from_seed, second_moment};
use erank_core::{ActivationDump, ChannelSelection, ProjectionPair, SynthDumpConfig, TeacherLayer, WrappedLayer};
use nalgebra::DMatrix;

pub struct FlowFixture {
    pub moment: DMatrix<f64>,
    pub pair: ProjectionPair,
    pub selection: ChannelSelection,
}

pub fn sample(l: usize, d: usize) -> DMatrix<f64> {
    anisotropic_sample(l, d, 200.0, &mut rng_from_seed(1)).expect("valid sample shape")
}

pub fn flow_fixture(d: usize, dprime: usize) -> FlowFixture {
    let x = sample(8 * d, d);
    FlowFixture {
        moment: second_moment(&x),
        pair: build_pair(&InitSpec::gaussian(0.02, 1), d, dprime).expect("valid pair shape"),
        selection: select_from_matrix(&x, dprime).expect("valid selection"),
    }
}

pub fn dump(d: usize, layers: usize, sequences: usize) -> ActivationDump {
    erank_core::synth_dump(&SynthDumpConfig {
        hidden_dim: d,
        num_layers: layers,
        num_sequences: sequences,
        seed: 1,
        ..Default::default()
    })
    .expect("valid dump config")
}

pub fn wrapped(d: usize, dprime: usize) -> (WrappedLayer, DMatrix<f64>) {
    let mut rng = rng_from_seed(2);
    let layer = WrappedLayer::random(TeacherLayer::random(d, 4, d / 8, 2 * d, &mut rng), dprime, &mut rng);
    (layer, gaussian_matrix(32, dprime, 1.0, &mut rng))
}
