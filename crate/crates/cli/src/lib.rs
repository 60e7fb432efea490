//! The `robustdiff` command-line tool: training, distillation, sampling,
//! evaluation and verification commands over a shared run configuration
//! and checkpoint format.

pub mod app;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod teacher;

pub use app::{run, Cli};
pub use checkpoint::{Checkpoint, ModelState};
pub use config::RunConfig;
pub use error::CliError;
