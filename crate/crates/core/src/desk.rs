//! Small fixed benchmarks used by the acceptance suite and the `desk` CLI preset.

use crate::compression::{empirical_alpha, CompressorSpec};
use crate::error::Result;
use crate::problems::{synth_logistic, synth_quadratic, PartitionStrategy, ProblemSpec};
use crate::rng::{seeded, Purpose};

pub const NODES: usize = 8;
pub const DIM: usize = 32;
pub const ROWS_PER_NODE: usize = 32;
pub const HETEROGENEITY: f64 = 0.5;
pub const LOGISTIC_ROWS_PER_NODE: usize = 64;
pub const LOGISTIC_SEPARATION: f64 = 1.0;
pub const LOGISTIC_L2: f64 = 1e-3;
pub const GAMMA_GRID: [f64; 4] = [1.0, 0.5, 0.1, 0.01];
pub const CALIBRATION_SAMPLES: usize = 10_000;

/// Least squares on a ring of 8 with `d = 32` and heterogeneity 0.5.
pub fn quadratic(seed: u64) -> Result<ProblemSpec> {
    synth_quadratic(NODES, DIM, ROWS_PER_NODE, HETEROGENEITY, seed)
}

/// Two-class logistic regression, label-sorted across 8 nodes.
pub fn logistic(seed: u64) -> Result<ProblemSpec> {
    synth_logistic(
        NODES,
        DIM,
        LOGISTIC_ROWS_PER_NODE,
        LOGISTIC_SEPARATION,
        PartitionStrategy::LabelSorted,
        LOGISTIC_L2,
        seed,
    )
}

/// Worst observed `||C[x] − x||² / ||x||²` over standard-normal draws of dimension `d`.
pub fn calibrated_alpha2(spec: &CompressorSpec, d: usize) -> Result<f64> {
    let (_, max) = empirical_alpha(spec, d, CALIBRATION_SAMPLES, &mut seeded(0, Purpose::Calibrate))?;
    Ok(max)
}
