//! Experiment runner over `rollout_grid`: throughput sweeps, BO studies on
//! the lander and CEM training on the tracker.

pub mod config;
pub mod output;
pub mod runs;

pub use config::{parse_config, ConfigError, Mode, RunConfig};
pub use output::{emit_plot_data, parse_metric_csv, CurveRecord, OutputError};
pub use runs::{run, RunContext, RunError, RunSummary};
