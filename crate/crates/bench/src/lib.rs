//! Shared scenario builders for the benchmarks.

use diffabm::engine::{ExecutionConfig, ExecutionMode, SimulationConfig};

/// Default configuration with `n` agents, `steps` steps, and one percent
/// initially infected.
pub fn scenario(n: usize, steps: usize, mode: ExecutionMode) -> SimulationConfig {
    let mut c = SimulationConfig::default();
    c.population.size = n;
    c.epi.initial_infected_fraction = 0.01;
    c.execution = ExecutionConfig {
        mode,
        horizon_steps: steps,
        seed: 1,
    };
    c
}
