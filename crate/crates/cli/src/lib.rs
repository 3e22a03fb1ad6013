//! Config-driven orchestration of the soil-mark workflow.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod products;

pub use config::{PipelineConfig, Product};
pub use error::{CliError, ExitKind};
pub use pipeline::{run_pipeline, Manifest};
