//! Experiment configuration, training loops and the end-to-end pipeline.

pub mod config;
pub mod guard;
pub mod pipeline;
pub mod report;
pub mod stages;
pub mod train;

pub use config::{ExperimentConfig, TrainConfig, WeightedWerReference};
pub use guard::RefGuard;
pub use pipeline::{run_pipeline, PipelineOptions, PipelineOutput};
pub use report::{MetricsReport, MetricsRow};
