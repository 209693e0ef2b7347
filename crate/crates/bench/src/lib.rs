//! Fixed benchmark fixtures. The criterion harness lives under `benches/`.

use tsfl_core::generators::{random_envy_instance, random_instance, CurveFamily, EnvySpec, RandomSpec};
use tsfl_core::envy::EnvyInstance;
use tsfl_core::queueing::QueueParams;
use tsfl_core::Instance;

/// Seeded mixed-family instance with `n` nodes on a grid of `grid_size` prices.
pub fn market(n: usize, grid_size: usize) -> Instance {
    let spec = RandomSpec { n, seed: 7, family: CurveFamily::Mixed, grid_size, ..RandomSpec::default() };
    random_instance(&spec).expect("fixture parameters are valid")
}

pub fn envy_market(n: usize) -> EnvyInstance {
    random_envy_instance(&EnvySpec { n, seed: 7, ..EnvySpec::default() }).expect("fixture parameters are valid")
}

pub fn balanced_queue(rate: f64) -> QueueParams {
    QueueParams::balanced(rate, 1.0, 0.1).expect("fixture parameters are valid")
}
