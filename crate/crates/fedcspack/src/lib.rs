//! Host side of the simulator: IDX ingestion, JSON configs, metrics files and
//! the run/sweep drivers behind the `fedcspack` binary.

pub mod config;
pub mod export;
pub mod idx;
pub mod runner;

pub use config::{ConfigDoc, ConfigError};
pub use export::{
    emit_series, read_metrics_csv, summarize_csv, write_run, ExportError, MetricsRow,
};
pub use idx::{load_idx, write_idx, IdxError};
pub use runner::{partition_report, run, sweep, RunError, RunOptions};
