//! Shared fixtures for the benchmarks in `benches/`.

use robustdiff::{EpsModel, ModelConfig, NoiseSchedule, Result, ScheduleKind, SeededRng, Tensor};

/// The default network: 3 hidden layers of width 128.
pub fn reference_model(data_dim: usize, steps: usize, seed: u64) -> Result<EpsModel> {
    EpsModel::init(&ModelConfig::default(), data_dim, steps, &mut SeededRng::new(seed))
}

pub fn cosine(steps: usize) -> NoiseSchedule {
    NoiseSchedule::build(ScheduleKind::Cosine, steps).expect("valid schedule")
}

pub fn normal(rows: usize, cols: usize, seed: u64) -> Tensor {
    SeededRng::new(seed).normal_tensor(&[rows, cols])
}
