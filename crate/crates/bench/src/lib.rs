//! Shared fixtures for the criterion benches.

use rnm_core::channel::TopologyConfig;
use rnm_core::maml::{self, Access, Task, TrainingConfig};
use rnm_core::policy::{self, NetworkWeights};

/// A scenario with `k` users, `m` antennas and `n` elements, the matching
/// network and a random initial phase vector.
pub fn fixture(k: usize, m: usize, n: usize, seed: u64) -> (Task, NetworkWeights, Vec<f64>, TrainingConfig) {
    let topo = TopologyConfig {
        num_users: k,
        num_antennas: m,
        num_elements: n,
        ..Default::default()
    };
    let cfg = TrainingConfig {
        seed,
        ..Default::default()
    };
    let task = Task::sample(&topo, seed, Access::default()).expect("valid topology");
    let weights = policy::init_weights(&cfg.layer_dims(&topo), seed).expect("valid dims");
    let theta0 = maml::random_phases(n, seed ^ 0x5eed);
    (task, weights, theta0, cfg)
}
