//! Experiment configs, the end-to-end pipeline, reports and sweeps.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod sweep;

pub use config::ExperimentConfig;
pub use pipeline::{build_datasets, generate_data, load_data, run_experiment, write_run, RunArtifacts, RunMetrics};
pub use report::{build_report, render_table, Report};
pub use sweep::{parse_grid, sweep_configs};
