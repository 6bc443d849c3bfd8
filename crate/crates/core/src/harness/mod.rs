//! Experiment configuration, evaluation, reports and sweeps.

mod config;
mod eval;
mod experiment;
mod output;

pub use config::{apply_override, DataConfig, DataSource, EvalConfig, ExperimentConfig, FederationConfig, ModelConfig};
pub use eval::{client_asr, distance_table, eval_acc, eval_asr, mean, DistanceRow};
pub use experiment::{
    build_federation, calibrate_pgd_radius, run_experiment, ClientMetrics, DataSummary, ExperimentReport, Federation,
};
pub use output::{expand_grid, metrics_csv, read_report, run_sweep, trigger_text, write_outputs, SweepRow};
