//! Command-line wiring for the calibration and distillation pipeline.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod serve;
pub mod stages;

pub use config::PipelineConfig;
pub use error::CliError;
pub use pipeline::{run_pipeline, stage_seed, Manifest};

/// Line-delimited JSON events on standard error. The filter comes from
/// `MIXUP_LOG`, defaulting to `level`.
pub fn init_logging(level: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_env("MIXUP_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_current_span(false)
        .try_init();
}
