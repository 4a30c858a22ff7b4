//! Shared fixtures for the criterion benches.

use ibed_core::estimator::{make_batch, Batch};
use ibed_core::{LinearModel, Network, NetworkConfig, SimulatorModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Critic sized for `model` with the given hidden widths.
pub fn critic(model: &dyn SimulatorModel, hidden: Vec<usize>) -> Network {
    Network::new(NetworkConfig::new(model.theta_dim(), model.data_dim(), hidden).with_seed(1))
        .expect("valid network config")
}

/// Linear model of dimension `dim` with a uniform random design and a batch of `rows`.
pub fn linear_fixture(dim: usize, rows: usize) -> (LinearModel, Vec<f64>, Batch) {
    let model = LinearModel::noisy(dim);
    let mut r = rng(7);
    let design: Vec<f64> = (0..dim).map(|_| r.random_range(-10.0..10.0)).collect();
    let batch = make_batch(&model, &design, rows, &mut r).expect("design inside domain");
    (model, design, batch)
}
