//! Staged, reproducible pipeline around `oodsynth-core`: a JSON run config,
//! artifacts on disk, and machine-readable reports.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod stages;

pub use artifacts::{Layout, ModelKind};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use stages::Pipeline;
