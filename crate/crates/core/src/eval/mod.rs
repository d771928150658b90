//! Dialogue metrics, run configuration, the stage pipeline and experiment grids.

pub mod config;
pub mod grid;
mod metrics;
pub mod pipeline;

pub use config::RunConfig;
pub use grid::{run_grid, GridRow, GridSpec, SummaryRow};
pub use metrics::{
    avg_turns, entity_f1, evaluate_expert, evaluate_policy, evaluate_random, report, roc_auc, success_rate,
    trajectory_f1, Breakdown, MetricReport,
};
pub use pipeline::{run_cell, CellOutcome, StageCache};
