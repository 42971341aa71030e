//! Experiment runner for the in-context vector workbench: JSON configs,
//! stage pipelines and run manifests.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod run;

pub use config::{parse_config, validate_config, ExperimentConfig, Method};
pub use error::{CliError, CliResult};
pub use run::{load_config, run_stage, ExtractKind, Overrides, RunManifest, Stage};
