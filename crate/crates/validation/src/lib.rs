//! Simulation scenarios shared by the acceptance suite.

use source_core::config::RunConfig;
use source_core::grid::VoxelGrid;
use source_core::simulator::{sample_ground_truth, simulate_cohort, Cohort};
use source_core::Result;

/// K = 3 Laplace sources, n = 20, T = 200, noise sd 0.05 on an 8×8×8 grid.
/// Voxel z-scoring is off: every simulated voxel shares one noise scale, so
/// z-scoring only inflates the noise-only voxels.
pub fn recovery_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.preprocess.zscore = false;
    let t = &mut cfg.simulation.truth;
    t.n_sources = 3;
    t.noise_sd = 0.05;
    cfg.simulation.dims = [8, 8, 8];
    cfg.simulation.n_subjects = 20;
    cfg.simulation.n_timepoints = 200;
    cfg.ica.n_components = 3;
    cfg
}

/// Recovery scenario with local propagation at spectral radius 0.6.
pub fn enrichment_config() -> RunConfig {
    let mut cfg = recovery_config();
    cfg.simulation.truth.b_density = 0.05;
    cfg.simulation.truth.target_radius = 0.6;
    cfg
}

/// Enrichment scenario with per-subject source amplitudes, so that symptoms
/// depend on the drivers.
pub fn ablation_config() -> RunConfig {
    let mut cfg = enrichment_config();
    cfg.simulation.subject.amplitude_log_sd = 0.3;
    cfg
}

/// Config for the end-to-end reproducibility check: small and quick.
pub fn determinism_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.simulation.n_subjects = 12;
    cfg.simulation.n_timepoints = 80;
    cfg.simulation.truth.n_sources = 2;
    cfg.simulation.truth.n_symptoms = 3;
    cfg.ica.n_components = 2;
    cfg.rootmap.lambda1_grid = vec![0.1, 0.01];
    cfg.rootmap.lambda2_grid = vec![0.1, 0.01];
    cfg.bootstrap.n_resamples = 6;
    cfg
}

/// Draws a ground truth and cohort from `cfg.simulation`.
pub fn simulate(cfg: &RunConfig, seed: u64) -> Result<(VoxelGrid, Cohort)> {
    let sim = &cfg.simulation;
    let grid = VoxelGrid::full(sim.dims, sim.voxel_size_mm)?;
    let truth = sample_ground_truth(&grid, &sim.truth, seed)?;
    let cohort = simulate_cohort(&truth, &grid, &sim.subject, sim.n_subjects, sim.n_timepoints, seed)?;
    Ok((grid, cohort))
}
