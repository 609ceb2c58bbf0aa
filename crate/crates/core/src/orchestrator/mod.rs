//! Pipelines, self-reflection, batch execution and ablation runs.

mod ablation;
mod batch;
mod config;
mod pipeline;

pub use ablation::{
    build_report, evaluate_config, run_ablation, AblationReport, AblationRow, ConfigRun, RunEnv,
    RunError, CSV_HEADER,
};
pub use batch::{read_dataset, run_batch, DataError, TraceSink};
pub use config::{AblationMatrix, ConfigError, ModuleFlags, PipelineConfig};
pub use pipeline::{call_counts, modules_called, Clock, Engine};
