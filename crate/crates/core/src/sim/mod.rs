pub mod monte_carlo;
pub mod report;
pub mod resample;
pub mod rng;
pub mod scenario;

pub use monte_carlo::{run_monte_carlo, MetricRow, MonteCarloConfig, MonteCarloReport};
pub use resample::{run_resampling, spike_effect, synthesize_pools, PoolSpec, ResampleConfig};
pub use scenario::{generate_replicate, generate_scenario, preset, scenario_preset, true_theta, Preset, ScenarioSpec};
