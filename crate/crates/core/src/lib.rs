//! Diffusion-model training, sampling and consistency distillation on small
//! dense data, with a self-contained reverse-mode autodiff engine.

pub mod autodiff;
pub mod checks;
pub mod consistency;
pub mod data_eval;
pub mod error;
pub mod models;
pub mod optim;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use consistency::{CdConfig, CdTrainer, DistanceMetric, OdeSolverKind, PerturbBranch};
pub use data_eval::{Dataset, DatasetKind, GaussianOracle, MetricsReport};
pub use error::{Error, Result};
pub use models::{ConsistencyModel, EmaPair, EpsModel, ModelConfig, NoisePredictor, Parameterization, Parameterized};
pub use optim::{Optimizer, OptimizerKind};
pub use rng::{RngState, SeededRng};
pub use samplers::{SamplerConfig, SamplerKind, Trajectory};
pub use schedule::{NoiseSchedule, ScheduleKind};
pub use tensor::Tensor;
pub use training::{AtConfig, DpmTrainer, LossWeight, TrainConfig, TrainMode};
