//! Configuration, persistence and the experiment pipeline.

pub mod config;
pub mod pipeline;
pub mod records;
pub mod report;

pub use config::{Condition, ExperimentConfig};
pub use pipeline::{run_experiment, run_workspace, ReportBundle, Workspace};
pub use records::{read_rollouts, write_rollouts, RolloutRecord};
pub use report::{emit_report, MetricRow, MetricsReport};
